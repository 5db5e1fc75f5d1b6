//! Named-parameter registry and versioned checkpoint container.
//!
//! Every learnable tensor is created through [`ParamStore::param`], which
//! seeds its initialization deterministically and keeps the `Var` handle so
//! optimizers and checkpoints see one flat name → tensor namespace.

use crate::error::{Error, Result};
use crate::rng;
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, RngCore};
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;
use std::path::Path;

/// Initialization scheme for a freshly created parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal(0, std²) resampled until |z| ≤ 2·std.
    TruncNormal(f64),
    Zeros,
    Ones,
}

pub struct ParamStore {
    device: Device,
    dtype: DType,
    rng: ChaCha12Rng,
    params: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            device,
            dtype,
            rng: rng::substream(seed, "params"),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn sample_trunc_normal(&mut self, std: f64) -> f64 {
        // Box–Muller, rejecting draws outside two standard deviations.
        loop {
            let u1: f64 = self.rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = self.rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Create and register a parameter, returning a tensor handle that stays
    /// connected to the underlying `Var` for gradient flow.
    pub fn param(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name \"{name}\"")));
        }
        let n: usize = dims.iter().product();
        let data: Vec<f64> = match init {
            Init::TruncNormal(std) => (0..n).map(|_| self.sample_trunc_normal(std)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let t = Tensor::from_vec(data, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let tensor = var.as_tensor().clone();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push((name.to_string(), var));
        Ok(tensor)
    }

    /// All variables, for optimizer construction.
    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|(_, v)| v.as_tensor().elem_count()).sum()
    }

    /// Overwrite every parameter from `tensors`; names must match exactly in
    /// both directions.
    pub fn load_tensors(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.params {
            let t = tensors.get(name).ok_or_else(|| {
                Error::Invalid(format!("checkpoint is missing parameter \"{name}\""))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::shape(
                    format!("{name}: {:?}", var.dims()),
                    format!("{:?}", t.dims()),
                ));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        for name in tensors.keys() {
            if !self.index.contains_key(name) {
                return Err(Error::Invalid(format!(
                    "checkpoint has unknown parameter \"{name}\""
                )));
            }
        }
        Ok(())
    }

    /// Copy the subset of `tensors` whose names carry `prefix`; returns how
    /// many parameters were overwritten.
    pub fn load_prefixed(&mut self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &self.params {
            if !name.starts_with(prefix) {
                continue;
            }
            let t = tensors.get(name).ok_or_else(|| {
                Error::Invalid(format!("source checkpoint lacks \"{name}\""))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::shape(
                    format!("{name}: {:?}", var.dims()),
                    format!("{:?}", t.dims()),
                ));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
            n += 1;
        }
        Ok(n)
    }
}

pub const CHECKPOINT_VERSION: &str = "1";

/// A deserialized checkpoint: raw tensors plus identity metadata.
pub struct Checkpoint {
    pub kind: String,
    pub config_json: String,
    pub tensors: HashMap<String, Tensor>,
}

fn tensor_bytes(t: &Tensor) -> Result<(safetensors::Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => {
            let v: Vec<f32> = flat.to_vec1()?;
            let mut bytes = Vec::with_capacity(v.len() * 4);
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            Ok((safetensors::Dtype::F32, bytes))
        }
        DType::F64 => {
            let v: Vec<f64> = flat.to_vec1()?;
            let mut bytes = Vec::with_capacity(v.len() * 8);
            for x in v {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            Ok((safetensors::Dtype::F64, bytes))
        }
        other => Err(Error::Invalid(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

/// Serialize named tensors with identity metadata (`kind` distinguishes the
/// pre-training model from the counting model; `config_json` is the config
/// echo verified on load).
pub fn save_checkpoint<P: AsRef<Path>>(
    path: P,
    named: &[(String, Var)],
    kind: &str,
    config_json: &str,
) -> Result<()> {
    let path = path.as_ref();
    let mut owned: Vec<(String, safetensors::Dtype, Vec<usize>, Vec<u8>)> = Vec::with_capacity(named.len());
    for (name, var) in named {
        let t = var.as_tensor();
        let (dt, bytes) = tensor_bytes(t)?;
        owned.push((name.clone(), dt, t.dims().to_vec(), bytes));
    }
    let views: Vec<(&str, safetensors::tensor::TensorView)> = owned
        .iter()
        .map(|(name, dt, dims, bytes)| {
            safetensors::tensor::TensorView::new(*dt, dims.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("serialization view: {e}"),
                })
        })
        .collect::<Result<_>>()?;
    let metadata = HashMap::from([
        ("format_version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("kind".to_string(), kind.to_string()),
        ("config".to_string(), config_json.to_string()),
    ]);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    safetensors::serialize_to_file(views, &Some(metadata), path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("write failed: {e}"),
    })
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("header: {e}"),
    })?;
    let md = meta.metadata().clone().unwrap_or_default();
    let version = md.get("format_version").cloned().unwrap_or_default();
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("format_version \"{version}\" != \"{CHECKPOINT_VERSION}\""),
        });
    }
    let kind = md.get("kind").cloned().ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: "missing kind metadata".into(),
    })?;
    let config_json = md.get("config").cloned().ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: "missing config metadata".into(),
    })?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("deserialize: {e}"),
    })?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        let dtype = match view.dtype() {
            safetensors::Dtype::F32 => DType::F32,
            safetensors::Dtype::F64 => DType::F64,
            other => {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: format!("tensor \"{name}\" has unsupported dtype {other:?}"),
                })
            }
        };
        let t = Tensor::from_raw_buffer(view.data(), dtype, view.shape(), device)?;
        tensors.insert(name, t);
    }
    Ok(Checkpoint { kind, config_json, tensors })
}

/// Fill a byte-seed from a u64 for optimizer-free reproducibility utilities.
pub fn fill_seed_bytes(seed: u64, out: &mut [u8]) {
    let mut r = rng::substream(seed, "bytes");
    r.fill_bytes(out);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_seed_deterministic() {
        let mut a = ParamStore::new(7, DType::F32, Device::Cpu);
        let mut b = ParamStore::new(7, DType::F32, Device::Cpu);
        let ta = a.param("w", &[4, 4], Init::TruncNormal(0.02)).unwrap();
        let tb = b.param("w", &[4, 4], Init::TruncNormal(0.02)).unwrap();
        let va: Vec<f32> = ta.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = tb.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        let mut c = ParamStore::new(8, DType::F32, Device::Cpu);
        let tc = c.param("w", &[4, 4], Init::TruncNormal(0.02)).unwrap();
        let vc: Vec<f32> = tc.flatten_all().unwrap().to_vec1().unwrap();
        assert_ne!(va, vc);
    }

    #[test]
    fn trunc_normal_bounded() {
        let mut s = ParamStore::new(1, DType::F64, Device::Cpu);
        let t = s.param("w", &[2048], Init::TruncNormal(0.02)).unwrap();
        let v: Vec<f64> = t.to_vec1().unwrap();
        assert!(v.iter().all(|x| x.abs() <= 0.04 + 1e-12));
        let mean: f64 = v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.param("w", &[2], Init::Zeros).unwrap();
        assert!(s.param("w", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_values_and_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.safetensors");
        let mut s = ParamStore::new(3, DType::F32, Device::Cpu);
        s.param("a.weight", &[3, 5], Init::TruncNormal(0.02)).unwrap();
        s.param("a.bias", &[5], Init::Zeros).unwrap();
        save_checkpoint(&path, s.named_vars(), "counting", "{\"d\":1}").unwrap();
        let ck = load_checkpoint(&path, &Device::Cpu).unwrap();
        assert_eq!(ck.kind, "counting");
        assert_eq!(ck.config_json, "{\"d\":1}");
        assert_eq!(ck.tensors.len(), 2);
        let orig: Vec<f32> = s.named_vars()[0].1.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let read: Vec<f32> = ck.tensors["a.weight"].flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(orig, read);

        let mut fresh = ParamStore::new(99, DType::F32, Device::Cpu);
        fresh.param("a.weight", &[3, 5], Init::TruncNormal(0.02)).unwrap();
        fresh.param("a.bias", &[5], Init::Zeros).unwrap();
        fresh.load_tensors(&ck.tensors).unwrap();
        let loaded: Vec<f32> = fresh.named_vars()[0].1.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(orig, loaded);
    }

    #[test]
    fn load_rejects_missing_and_unknown_names() {
        let mut s = ParamStore::new(0, DType::F32, Device::Cpu);
        s.param("w", &[2], Init::Zeros).unwrap();
        let empty = HashMap::new();
        assert!(s.load_tensors(&empty).is_err());
        let mut extra = HashMap::new();
        extra.insert("w".to_string(), Tensor::zeros(&[2][..], DType::F32, &Device::Cpu).unwrap());
        extra.insert("ghost".to_string(), Tensor::zeros(&[2][..], DType::F32, &Device::Cpu).unwrap());
        assert!(s.load_tensors(&extra).is_err());
    }
}
