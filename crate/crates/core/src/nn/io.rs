//! Weight file format (little-endian):
//!
//! ```text
//! "FQNN"  u32 version  u32 arch_len  arch (utf-8)
//! u32 tensor_count  { u32 rank  u32 dims[rank] } × tensor_count
//! f64 data for every tensor, in order
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Activation, Dense, LstmLayer, LstmParams, MlpParams, ParamSet};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FQNN";
pub const WEIGHT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub arch: String,
    pub tensors: Vec<Tensor>,
}

impl WeightFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arch.len() as u32).to_le_bytes());
        out.extend_from_slice(self.arch.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut bytes, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                "FQNN"
            )));
        }
        let version = read_u32(&mut bytes)?;
        if version != WEIGHT_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported weight format version {version}, expected {WEIGHT_FORMAT_VERSION}"
            )));
        }
        let arch_len = read_u32(&mut bytes)? as usize;
        if arch_len > bytes.len() {
            return Err(Error::Format("truncated architecture string".into()));
        }
        let mut arch = vec![0u8; arch_len];
        read_exact(&mut bytes, &mut arch)?;
        let arch = String::from_utf8(arch).map_err(|_| Error::Format("architecture is not utf-8".into()))?;
        let count = read_u32(&mut bytes)? as usize;
        let mut shapes = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = read_u32(&mut bytes)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(read_u32(&mut bytes)? as usize);
            }
            shapes.push(shape);
        }
        let mut tensors = Vec::with_capacity(count);
        for shape in shapes {
            let n: usize = shape.iter().product();
            if n * 8 > bytes.len() {
                return Err(Error::Format("truncated tensor data".into()));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut bytes, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            tensors.push(Tensor { shape, data });
        }
        if !bytes.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len())));
        }
        Ok(Self { arch, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(src: &mut &[u8], dst: &mut [u8]) -> Result<()> {
    src.read_exact(dst)
        .map_err(|_| Error::Format("unexpected end of file".into()))
}

fn read_u32(src: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(src, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Networks that round-trip through [`WeightFile`].
pub trait Persist: ParamSet + Sized {
    fn arch(&self) -> String;
    fn shapes(&self) -> Vec<Vec<usize>>;
    /// Zero-valued network with the architecture described by `arch`.
    fn from_arch(arch: &str) -> Result<Self>;

    fn to_weight_file(&self) -> WeightFile {
        WeightFile {
            arch: self.arch(),
            tensors: self
                .shapes()
                .into_iter()
                .zip(self.tensors())
                .map(|(shape, data)| Tensor {
                    shape,
                    data: data.to_vec(),
                })
                .collect(),
        }
    }

    fn from_weight_file(file: &WeightFile) -> Result<Self> {
        let mut net = Self::from_arch(&file.arch)?;
        fill_checked(&mut net, file)?;
        Ok(net)
    }

    /// Loads into an existing architecture, rejecting any shape difference.
    fn load_into(template: &Self, file: &WeightFile) -> Result<Self> {
        let mut net = template.zeros_like();
        fill_checked(&mut net, file)?;
        Ok(net)
    }
}

fn fill_checked<P: Persist>(net: &mut P, file: &WeightFile) -> Result<()> {
    let expected = net.shapes();
    if expected.len() != file.tensors.len() {
        return Err(Error::ShapeMismatch {
            what: "tensor count".into(),
            expected: expected.len().to_string(),
            found: file.tensors.len().to_string(),
        });
    }
    for (k, (exp, t)) in expected.iter().zip(&file.tensors).enumerate() {
        if *exp != t.shape {
            return Err(Error::ShapeMismatch {
                what: format!("tensor {k}"),
                expected: format!("{exp:?}"),
                found: format!("{:?}", t.shape),
            });
        }
    }
    for (dst, t) in net.tensors_mut().into_iter().zip(&file.tensors) {
        dst.copy_from_slice(&t.data);
    }
    Ok(())
}

pub fn save_weights<P: Persist>(params: &P, path: impl AsRef<Path>) -> Result<()> {
    params.to_weight_file().write(path)
}

pub fn load_weights<P: Persist>(path: impl AsRef<Path>) -> Result<P> {
    P::from_weight_file(&WeightFile::read(path)?)
}

fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    s.split('-')
        .map(|x| {
            x.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad layer size {x:?}")))
        })
        .collect()
}

impl Persist for MlpParams {
    fn arch(&self) -> String {
        let sizes: Vec<String> = self.sizes().iter().map(|s| s.to_string()).collect();
        format!("mlp {} {}", self.hidden_activation.name(), sizes.join("-"))
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [vec![l.n_out, l.n_in], vec![l.n_out]])
            .collect()
    }

    fn from_arch(arch: &str) -> Result<Self> {
        let parts: Vec<&str> = arch.split_whitespace().collect();
        match parts.as_slice() {
            ["mlp", act, sizes] => {
                let act = Activation::parse(act)
                    .ok_or_else(|| Error::Format(format!("unknown activation {act:?}")))?;
                let sizes = parse_sizes(sizes)?;
                if sizes.len() < 2 {
                    return Err(Error::Format("mlp needs at least two sizes".into()));
                }
                Ok(MlpParams::zeros(&sizes, act))
            }
            _ => Err(Error::Format(format!("not an mlp architecture: {arch:?}"))),
        }
    }
}

impl Persist for LstmParams {
    fn arch(&self) -> String {
        let mut sizes = vec![self.n_in().to_string()];
        sizes.extend(self.hidden_sizes().iter().map(|s| s.to_string()));
        format!("lstm {} {}", sizes.join("-"), self.n_classes())
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut v: Vec<Vec<usize>> = self
            .layers
            .iter()
            .flat_map(|l: &LstmLayer| {
                [
                    vec![4 * l.n_hidden, l.n_in + l.n_hidden],
                    vec![4 * l.n_hidden],
                ]
            })
            .collect();
        let h: &Dense = &self.head;
        v.push(vec![h.n_out, h.n_in]);
        v.push(vec![h.n_out]);
        v
    }

    fn from_arch(arch: &str) -> Result<Self> {
        let parts: Vec<&str> = arch.split_whitespace().collect();
        match parts.as_slice() {
            ["lstm", sizes, classes] => {
                let sizes = parse_sizes(sizes)?;
                let classes: usize = classes
                    .parse()
                    .map_err(|_| Error::Format(format!("bad class count {classes:?}")))?;
                if sizes.len() < 2 {
                    return Err(Error::Format("lstm needs input and hidden sizes".into()));
                }
                Ok(LstmParams::zeros(sizes[0], &sizes[1..], classes))
            }
            _ => Err(Error::Format(format!("not an lstm architecture: {arch:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = MlpParams::init(&[18, 64, 64, 4], Activation::Tanh, &mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.fqnn");
        save_weights(&p, &path).unwrap();
        let q: MlpParams = load_weights(&path).unwrap();
        assert_eq!(p, q);
        let a: Vec<u64> = p.flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = q.flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn lstm_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = LstmParams::init(18, &[6, 4], 5, &mut rng);
        let file = p.to_weight_file();
        assert_eq!(file.arch, "lstm 18-6-4 5");
        let q = LstmParams::from_weight_file(&WeightFile::from_bytes(&file.to_bytes()).unwrap()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn mismatched_shape_names_expected_and_found() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = MlpParams::init(&[18, 32, 4], Activation::Tanh, &mut rng);
        let template = MlpParams::zeros(&[18, 64, 4], Activation::Tanh);
        let err = MlpParams::load_into(&template, &p.to_weight_file()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[64, 18]"), "{msg}");
        assert!(msg.contains("[32, 18]"), "{msg}");
    }

    #[test]
    fn arch_inconsistent_with_shapes_rejected() {
        let p = MlpParams::zeros(&[18, 8, 2], Activation::Tanh);
        let mut f = p.to_weight_file();
        f.arch = "mlp tanh 18-9-2".into();
        assert!(matches!(
            MlpParams::from_weight_file(&f),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn corrupted_magic_rejected() {
        let mut bytes = MlpParams::zeros(&[2, 2], Activation::Tanh).to_weight_file().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(WeightFile::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn version_and_truncation_rejected() {
        let bytes = MlpParams::zeros(&[2, 2], Activation::Tanh).to_weight_file().to_bytes();
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(WeightFile::from_bytes(&v2).unwrap_err().to_string().contains("version"));
        assert!(WeightFile::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
