use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conv::ConvGeom;
use crate::error::NnError;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<S>,
}

/// An ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S> {
    params: Vec<Param<S>>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Index {
    dtype: String,
    params: Vec<IndexEntry>,
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<S>) -> ParamId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.push(Param {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    /// He-normal weights and zero bias for a convolution.
    pub fn add_conv<R: Rng>(
        &mut self,
        name: &str,
        geom: &ConvGeom,
        rng: &mut R,
    ) -> (ParamId, ParamId) {
        let fan_in = (geom.taps() * geom.in_ch) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let w = (0..geom.weight_len())
            .map(|_| S::from_f64_lossy(normal.sample(rng)))
            .collect();
        let wid = self.add(
            format!("{name}.weight"),
            vec![geom.taps() * geom.in_ch, geom.out_ch],
            w,
        );
        let bid = self.add(
            format!("{name}.bias"),
            vec![geom.out_ch],
            vec![S::zero(); geom.out_ch],
        );
        (wid, bid)
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.params[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.params[id.0].data
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<T: Real>(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p
                        .data
                        .iter()
                        .map(|v| T::from_f64_lossy(v.as_f64()))
                        .collect(),
                })
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and the `f32` little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for s in &p.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in &p.data {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies values from `other`, which must hold the same names and shapes.
    pub fn assign_from(&mut self, other: &ParamSet<S>) -> Result<(), NnError> {
        if other.params.len() != self.params.len() {
            return Err(NnError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(NnError::ParamMismatch(dst.name.clone()));
            }
            dst.data.clone_from(&src.data);
        }
        Ok(())
    }

    /// Writes `<stem>.json` (index) and `<stem>.bin` (little-endian `f32`).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), NnError> {
        let mut blob = Vec::with_capacity(self.scalar_count() * 4);
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for p in &self.params {
            entries.push(IndexEntry {
                name: p.name.clone(),
                shape: p.shape.clone(),
                offset,
                len: p.data.len(),
            });
            for v in &p.data {
                blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
            offset += p.data.len();
        }
        let index = Index {
            dtype: "f32".into(),
            params: entries,
        };
        let json =
            serde_json::to_string_pretty(&index).map_err(|e| NnError::Index(e.to_string()))?;
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| NnError::Io { path, source }
        };
        let jp = dir.join(format!("{stem}.json"));
        let bp = dir.join(format!("{stem}.bin"));
        fs::write(&jp, json).map_err(io(&jp))?;
        fs::write(&bp, blob).map_err(io(&bp))?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, NnError> {
        let jp = dir.join(format!("{stem}.json"));
        let bp = dir.join(format!("{stem}.bin"));
        let text = fs::read_to_string(&jp).map_err(|source| NnError::Io {
            path: jp.display().to_string(),
            source,
        })?;
        let index: Index =
            serde_json::from_str(&text).map_err(|e| NnError::Index(e.to_string()))?;
        if index.dtype != "f32" {
            return Err(NnError::Index(format!("unsupported dtype {}", index.dtype)));
        }
        let blob = fs::read(&bp).map_err(|source| NnError::Io {
            path: bp.display().to_string(),
            source,
        })?;
        let total: usize = index.params.iter().map(|e| e.len).sum();
        if blob.len() != total * 4 {
            return Err(NnError::BlobSize {
                expected: total * 4,
                found: blob.len(),
            });
        }
        let mut set = Self::new();
        for e in index.params {
            if e.shape.iter().product::<usize>() != e.len || e.offset + e.len > total {
                return Err(NnError::Index(format!("inconsistent entry {}", e.name)));
            }
            let data = blob[e.offset * 4..(e.offset + e.len) * 4]
                .chunks_exact(4)
                .map(|b| S::from_f64_lossy(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            set.add(e.name, e.shape, data);
        }
        Ok(set)
    }
}

/// Gradient buffers laid out like a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    pub(crate) bufs: Vec<Vec<S>>,
}

impl<S: Real> Gradients<S> {
    pub fn zeros_like(set: &ParamSet<S>) -> Self {
        Self {
            bufs: set
                .params()
                .iter()
                .map(|p| vec![S::zero(); p.data.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.bufs[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &[S]) {
        for (a, &b) in self.bufs[id.0].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn add(&mut self, other: &Gradients<S>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: S) {
        for b in &mut self.bufs {
            for x in b.iter_mut() {
                *x = *x * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|v| v.is_finite())
    }
}
