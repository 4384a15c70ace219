//! Single-file checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      8 bytes   "PQNETCKP"
//! version    u32
//! config     u32 length + UTF-8 `key=value` lines
//! tensors    u32 count, then per tensor:
//!            u32 name length + UTF-8 name, u32 rank, rank x u64 dims,
//!            prod(dims) x f64 values
//! ```
//!
//! The config echo carries the model architecture (so a checkpoint is
//! self-describing) plus whatever run settings the writer adds.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pesqnet_core::dns::{DnsConfig, DnsModel, MaskActivation};
use pesqnet_core::dsp::{StftConfig, Window};
use pesqnet_core::nn::{Activation, ParamStore};
use pesqnet_core::pesqnet::{BlockPadding, ConvStage, PesqNet, PesqNetConfig, Variant};
use pesqnet_core::Tensor;

use crate::error::{Error, Result};
use crate::kv::KeyValues;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PQNETCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which network a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Dns,
    PesqNet,
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            ModelKind::Dns => "dns",
            ModelKind::PesqNet => "pesqnet",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn kind(&self) -> Option<ModelKind> {
        match self.config.get("kind").map(String::as_str) {
            Some("dns") => Some(ModelKind::Dns),
            Some("pesqnet") => Some(ModelKind::PesqNet),
            _ => None,
        }
    }

    pub fn for_dns(model: &DnsModel, params: ParamStore) -> Self {
        let mut config = dns_config_to_kv(model.config());
        config.insert("kind".into(), ModelKind::Dns.name().into());
        Self { config, params }
    }

    pub fn for_pesqnet(net: &PesqNet, params: ParamStore) -> Self {
        let mut config = pesqnet_config_to_kv(net.config());
        config.insert("kind".into(), ModelKind::PesqNet.name().into());
        Self { config, params }
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind() != Some(kind) {
            return Err(Error::Config(format!("checkpoint holds {:?}, expected {}", self.config.get("kind"), kind.name())));
        }
        Ok(())
    }

    /// Rebuilds the DNS described by the config echo and checks that the
    /// stored tensors fit it.
    pub fn dns(&self) -> Result<DnsModel> {
        self.expect_kind(ModelKind::Dns)?;
        let model = DnsModel::new(dns_config_from_kv(&KeyValues::from_map(self.config.clone()))?)?;
        let fresh = model.init_params(&mut pesqnet_core::rng::Rng::new(0), false);
        fresh.check_compatible(&self.params)?;
        Ok(model)
    }

    pub fn pesqnet(&self) -> Result<PesqNet> {
        self.expect_kind(ModelKind::PesqNet)?;
        let net = PesqNet::new(pesqnet_config_from_kv(&KeyValues::from_map(self.config.clone()))?)?;
        let fresh = net.init_params(&mut pesqnet_core::rng::Rng::new(0));
        fresh.check_compatible(&self.params)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text: String = self.config.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        put_bytes(&mut out, text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("checkpoint format version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let text = r.string()?;
        let mut config = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format(path, format!("bad config line `{line}`")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            params.insert(name, Tensor::from_vec(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after the last tensor"));
        }
        Ok(Self { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(self.path, "truncated checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.path, "invalid UTF-8 in checkpoint"))
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn window_name(w: Window) -> &'static str {
    match w {
        Window::PeriodicHann => "hann",
        Window::Rectangular => "rect",
    }
}

pub fn dns_config_to_kv(c: &DnsConfig) -> BTreeMap<String, String> {
    let mask = match c.mask_activation {
        MaskActivation::TanhMagnitudePhase => "tanh_mag_phase",
    };
    [
        ("dns.encoder_channels", join(&c.encoder_channels)),
        ("dns.recurrent_units", c.recurrent_units.to_string()),
        ("dns.input_bins", c.input_bins.to_string()),
        ("dns.kernel_freq", c.kernel_freq.to_string()),
        ("dns.kernel_time", c.kernel_time.to_string()),
        ("dns.activation", c.activation.name()),
        ("dns.mask_activation", mask.into()),
        ("stft.frame_length", c.stft.frame_length.to_string()),
        ("stft.hop", c.stft.hop.to_string()),
        ("stft.fft_size", c.stft.fft_size.to_string()),
        ("stft.window", window_name(c.stft.window).into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// DNS architecture from `dns.*` and `stft.*` keys; absent keys keep their
/// defaults.
pub fn dns_config_from_kv(kv: &KeyValues) -> Result<DnsConfig> {
    let d = DnsConfig::default();
    let window = match kv.str("stft.window") {
        None | Some("hann") => Window::PeriodicHann,
        Some("rect") => Window::Rectangular,
        Some(w) => return Err(Error::Config(format!("unknown window `{w}`"))),
    };
    match kv.str("dns.mask_activation") {
        None | Some("tanh_mag_phase") => {}
        Some(m) => return Err(Error::Config(format!("unknown mask activation `{m}`"))),
    }
    let activation = match kv.str("dns.activation") {
        Some(a) => Activation::parse(a)?,
        None => d.activation,
    };
    Ok(DnsConfig {
        encoder_channels: kv.list("dns.encoder_channels")?.unwrap_or(d.encoder_channels),
        recurrent_units: kv.get_or("dns.recurrent_units", d.recurrent_units)?,
        input_bins: kv.get_or("dns.input_bins", d.input_bins)?,
        kernel_freq: kv.get_or("dns.kernel_freq", d.kernel_freq)?,
        kernel_time: kv.get_or("dns.kernel_time", d.kernel_time)?,
        activation,
        mask_activation: MaskActivation::TanhMagnitudePhase,
        stft: StftConfig {
            frame_length: kv.get_or("stft.frame_length", d.stft.frame_length)?,
            hop: kv.get_or("stft.hop", d.stft.hop)?,
            fft_size: kv.get_or("stft.fft_size", d.stft.fft_size)?,
            window,
        },
    })
}

pub fn pesqnet_config_to_kv(c: &PesqNetConfig) -> BTreeMap<String, String> {
    let stages: Vec<String> = c.stages.iter().map(|s| format!("{}x{}x{}", s.filters, s.pool_freq, s.pool_time)).collect();
    [
        ("pesqnet.variant", c.variant.short_name().to_string()),
        ("pesqnet.input_bins", c.input_bins.to_string()),
        ("pesqnet.block_width", c.block_width.to_string()),
        ("pesqnet.kernel_widths", join(&c.kernel_widths)),
        ("pesqnet.kernel_height", c.kernel_height.to_string()),
        ("pesqnet.stages", stages.join(",")),
        ("pesqnet.time_steps", c.time_steps.to_string()),
        ("pesqnet.blstm_units", c.blstm_units.to_string()),
        ("pesqnet.fc_sizes", join(&c.fc_sizes)),
        ("pesqnet.activation", c.activation.name()),
        ("pesqnet.block_padding", "zero".into()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn parse_stage(s: &str) -> Result<ConvStage> {
    let parts: Vec<&str> = s.trim().split('x').collect();
    let bad = || Error::Config(format!("conv stage `{s}` is not FILTERSxPOOLFxPOOLT"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n = |p: &str| p.parse::<usize>().map_err(|_| bad());
    Ok(ConvStage { filters: n(parts[0])?, pool_freq: n(parts[1])?, pool_time: n(parts[2])? })
}

/// PESQNet architecture from `pesqnet.*` keys; absent keys keep their
/// defaults.
pub fn pesqnet_config_from_kv(kv: &KeyValues) -> Result<PesqNetConfig> {
    let d = PesqNetConfig::default();
    let stages = match kv.str("pesqnet.stages") {
        Some(s) => s.split(',').map(parse_stage).collect::<Result<Vec<_>>>()?,
        None => d.stages,
    };
    match kv.str("pesqnet.block_padding") {
        None | Some("zero") => {}
        Some(p) => return Err(Error::Config(format!("unknown block padding `{p}`"))),
    }
    let variant = match kv.str("pesqnet.variant") {
        Some(v) => Variant::parse(v)?,
        None => d.variant,
    };
    let activation = match kv.str("pesqnet.activation") {
        Some(a) => Activation::parse(a)?,
        None => d.activation,
    };
    Ok(PesqNetConfig {
        variant,
        input_bins: kv.get_or("pesqnet.input_bins", d.input_bins)?,
        block_width: kv.get_or("pesqnet.block_width", d.block_width)?,
        kernel_widths: kv.list("pesqnet.kernel_widths")?.unwrap_or(d.kernel_widths),
        kernel_height: kv.get_or("pesqnet.kernel_height", d.kernel_height)?,
        stages,
        time_steps: kv.get_or("pesqnet.time_steps", d.time_steps)?,
        blstm_units: kv.get_or("pesqnet.blstm_units", d.blstm_units)?,
        fc_sizes: kv.list("pesqnet.fc_sizes")?.unwrap_or(d.fc_sizes),
        activation,
        block_padding: BlockPadding::ZeroPad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pesqnet_core::dsp::Waveform;
    use pesqnet_core::rng::Rng;

    #[test]
    fn dns_round_trip_gives_identical_outputs() {
        let model = DnsModel::new(DnsConfig { encoder_channels: vec![2, 3], recurrent_units: 4, ..Default::default() }).unwrap();
        let params = model.init_params(&mut Rng::new(1), false);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ckpt");
        Checkpoint::for_dns(&model, params.clone()).save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.params, params);
        let m2 = back.dns().unwrap();
        assert_eq!(m2.config(), model.config());
        let mut rng = Rng::new(2);
        let y = Waveform::new((0..1000).map(|_| rng.normal()).collect(), 16_000).unwrap();
        assert_eq!(model.enhance(&params, &y).unwrap(), m2.enhance(&back.params, &y).unwrap());
        assert!(back.pesqnet().is_err());
    }

    #[test]
    fn pesqnet_config_round_trip() {
        for v in [Variant::NonIntrusive, Variant::EarlyFusion, Variant::MiddleFusion] {
            let c = PesqNetConfig { variant: v, ..Default::default() };
            let back = pesqnet_config_from_kv(&KeyValues::from_map(pesqnet_config_to_kv(&c))).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let model = DnsModel::new(DnsConfig { encoder_channels: vec![2], recurrent_units: 2, ..Default::default() }).unwrap();
        let bytes = Checkpoint::for_dns(&model, model.init_params(&mut Rng::new(0), false)).to_bytes();
        let p = Path::new("x");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(Checkpoint::from_bytes(&bad, p).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense", p).is_err());
    }
}
