//! Network weights, He initialisation and the checkpoint file format.
//!
//! Checkpoints are little-endian:
//!
//! ```text
//! magic    "CNNP"
//! version  u32 (currently 1)
//! layers   u32, one entry per spec layer, parameterless layers included
//! per layer:
//!   tensors  u32 (0, or 2 for weight then bias)
//!   per tensor: rank u32, rank x u32 dims, prod(dims) x f32 row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Normal};

use super::{NetworkSpec, NnError, Real};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CNNP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight_dims: Vec<usize>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerParams<T> {
    pub fn fan_in(&self) -> usize {
        self.weight_dims[1..].iter().product()
    }

    pub(crate) fn weight_f64(&self) -> Vec<f64> {
        self.weight.iter().map(|v| v.to_f64()).collect()
    }

    pub(crate) fn bias_f64(&self) -> Vec<f64> {
        self.bias.iter().map(|v| v.to_f64()).collect()
    }
}

/// One optional entry per spec layer; `None` for parameterless layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet<T> {
    pub layers: Vec<Option<LayerParams<T>>>,
}

impl<T: Real> ParameterSet<T> {
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|p| p.weight.iter().chain(&p.bias).all(|v| v.to_f64().is_finite()))
    }

    pub fn convert<U: Real>(&self) -> ParameterSet<U> {
        ParameterSet {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weight_dims: p.weight_dims.clone(),
                        weight: p.weight.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                        bias: p.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    })
                })
                .collect(),
        }
    }

    /// Checks that every layer's parameters have the shapes `spec` implies.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<(), NnError> {
        let shapes = spec.shapes()?;
        if self.layers.len() != spec.layers.len() {
            return Err(NnError::ParameterShape {
                layer: self.layers.len().min(spec.layers.len()),
                kind: "network".into(),
                detail: format!(
                    "parameter set has {} layers, spec has {}",
                    self.layers.len(),
                    spec.layers.len()
                ),
            });
        }
        for (i, (l, params)) in spec.layers.iter().zip(&self.layers).enumerate() {
            let expected = NetworkSpec::parameter_dims(l.layer, shapes[i]);
            let mismatch = |detail: String| NnError::ParameterShape {
                layer: i,
                kind: l.layer.to_string(),
                detail,
            };
            match (expected, params) {
                (None, None) => {}
                (None, Some(_)) => return Err(mismatch("unexpected parameters".into())),
                (Some(_), None) => return Err(mismatch("missing parameters".into())),
                (Some((dims, bias)), Some(p)) => {
                    if p.weight_dims != dims {
                        return Err(mismatch(format!(
                            "weight dims {:?}, expected {:?}",
                            p.weight_dims, dims
                        )));
                    }
                    let n: usize = dims.iter().product();
                    if p.weight.len() != n {
                        return Err(mismatch(format!("{} weights, expected {n}", p.weight.len())));
                    }
                    if p.bias.len() != bias {
                        return Err(mismatch(format!("{} biases, expected {bias}", p.bias.len())));
                    }
                }
            }
        }
        Ok(())
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases. Layer `i`
/// draws from its own `(seed, "init", i)` stream.
pub fn init_parameters<T: Real>(spec: &NetworkSpec, seed: u64) -> Result<ParameterSet<T>, NnError> {
    let shapes = spec.shapes()?;
    let layers = spec
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            NetworkSpec::parameter_dims(l.layer, shapes[i]).map(|(dims, bias)| {
                let n: usize = dims.iter().product();
                let fan_in: usize = dims[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut rng = crate::seed::stream(seed, crate::seed::TAG_INIT, i as u64);
                LayerParams {
                    weight_dims: dims,
                    weight: (0..n).map(|_| T::from_f64(normal.sample(&mut rng))).collect(),
                    bias: vec![T::default(); bias],
                }
            })
        })
        .collect();
    Ok(ParameterSet { layers })
}

/// Serialises `params` in checkpoint format.
pub fn write_parameters(params: &ParameterSet<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * params.parameter_count());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for layer in &params.layers {
        match layer {
            None => out.extend_from_slice(&0u32.to_le_bytes()),
            Some(p) => {
                out.extend_from_slice(&2u32.to_le_bytes());
                for (dims, values) in [(&p.weight_dims[..], &p.weight), (&[p.bias.len()][..], &p.bias)] {
                    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
                    for &d in dims {
                        out.extend_from_slice(&(d as u32).to_le_bytes());
                    }
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

pub fn save_parameters(params: &ParameterSet<f32>, path: &Path) -> Result<(), NnError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&write_parameters(params))?;
    file.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(NnError::Truncated(self.bytes.len())),
        }
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// A parsed checkpoint without reference to any network spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ParameterSet<f32>,
}

/// Parses checkpoint bytes. Rejects bad magic, unknown versions, truncation
/// and trailing data.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NnError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(NnError::Checkpoint("bad magic, not a CNNP checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported format version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let tensors = r.u32()?;
        match tensors {
            0 => layers.push(None),
            2 => {
                let read_tensor = |r: &mut Reader| -> Result<(Vec<usize>, Vec<f32>), NnError> {
                    let rank = r.u32()? as usize;
                    if rank == 0 || rank > 8 {
                        return Err(NnError::Checkpoint(format!("layer {i}: tensor rank {rank}")));
                    }
                    let dims = (0..rank)
                        .map(|_| r.u32().map(|d| d as usize))
                        .collect::<Result<Vec<_>, _>>()?;
                    let n = dims
                        .iter()
                        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                        .ok_or_else(|| NnError::Checkpoint(format!("layer {i}: tensor too large")))?;
                    let raw = r.take(n.checked_mul(4).ok_or(NnError::Truncated(bytes.len()))?)?;
                    let values = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    Ok((dims, values))
                };
                let (weight_dims, weight) = read_tensor(&mut r)?;
                let (bias_dims, bias) = read_tensor(&mut r)?;
                if bias_dims.len() != 1 {
                    return Err(NnError::Checkpoint(format!("layer {i}: bias must be rank 1")));
                }
                layers.push(Some(LayerParams {
                    weight_dims,
                    weight,
                    bias,
                }));
            }
            n => return Err(NnError::Checkpoint(format!("layer {i}: {n} tensors, expected 0 or 2"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(NnError::Checkpoint(format!(
            "{} trailing bytes after last layer",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        version,
        params: ParameterSet { layers },
    })
}

/// Loads a checkpoint and checks it against `spec`.
pub fn load_parameters(spec: &NetworkSpec, path: &Path) -> Result<ParameterSet<f32>, NnError> {
    let bytes = fs::read(path)?;
    let checkpoint = read_checkpoint(&bytes)?;
    checkpoint.params.check_against(spec)?;
    Ok(checkpoint.params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkSpec {
        NetworkSpec::parse(8, 8, "conv4 relu pool flatten dense5 relu out2").unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a: ParameterSet<f32> = init_parameters(&tiny(), 1).unwrap();
        let b: ParameterSet<f32> = init_parameters(&tiny(), 1).unwrap();
        let c: ParameterSet<f32> = init_parameters(&tiny(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.layers.iter().flatten().all(|p| p.bias.iter().all(|&v| v == 0.0)));
        a.check_against(&tiny()).unwrap();
    }

    #[test]
    fn he_std_matches_fan_in() {
        // dense layer with fan_in 3072 and 10^4+ weights
        let spec = NetworkSpec::parse(32, 32, "flatten dense4 out2").unwrap();
        let params: ParameterSet<f64> = init_parameters(&spec, 5).unwrap();
        let p = params.layers[1].as_ref().unwrap();
        assert!(p.weight.len() >= 10_000);
        let n = p.weight.len() as f64;
        let mean = p.weight.iter().sum::<f64>() / n;
        let std = (p.weight.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0 / 3072.0f64).sqrt();
        assert!((std - target).abs() / target < 0.1, "std {std} vs {target}");
        assert!(mean.abs() < 0.1 * target);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let params: ParameterSet<f32> = init_parameters(&tiny(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.cnnp");
        save_parameters(&params, &path).unwrap();
        let loaded = load_parameters(&tiny(), &path).unwrap();
        for (a, b) in params.layers.iter().flatten().zip(loaded.layers.iter().flatten()) {
            assert!(a.weight.iter().zip(&b.weight).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(params, loaded);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let params: ParameterSet<f32> = init_parameters(&tiny(), 3).unwrap();
        let bytes = write_parameters(&params);
        for cut in [0, 3, 8, 11, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(read_checkpoint(&bytes[..cut]), Err(NnError::Truncated(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes() {
        let params: ParameterSet<f32> = init_parameters(&tiny(), 3).unwrap();
        let mut bytes = write_parameters(&params);
        bytes[0] = b'X';
        assert!(matches!(read_checkpoint(&bytes), Err(NnError::Checkpoint(_))));
        let mut bytes = write_parameters(&params);
        bytes[4] = 9;
        assert!(matches!(read_checkpoint(&bytes), Err(NnError::Checkpoint(_))));
        let mut bytes = write_parameters(&params);
        bytes.push(0);
        assert!(matches!(read_checkpoint(&bytes), Err(NnError::Checkpoint(_))));
    }

    #[test]
    fn wrong_spec_names_first_mismatched_layer() {
        let params: ParameterSet<f32> = init_parameters(&tiny(), 3).unwrap();
        let other = NetworkSpec::parse(8, 8, "conv4 relu pool flatten dense6 relu out2").unwrap();
        match params.check_against(&other) {
            Err(NnError::ParameterShape { layer, kind, .. }) => {
                assert_eq!(layer, 4);
                assert_eq!(kind, "dense6");
            }
            other => panic!("unexpected {other:?}"),
        }
        let shorter = NetworkSpec::parse(8, 8, "conv4 relu pool flatten out2").unwrap();
        assert!(matches!(
            params.check_against(&shorter),
            Err(NnError::ParameterShape { .. })
        ));
    }
}
