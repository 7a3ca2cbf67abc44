//! Archive of precomputed encoder outputs.
//!
//! Lets the prompting module be trained on embeddings produced elsewhere
//! (for instance by a real vision-language model) and carries the
//! pre/post-prompting dumps used for external plotting.

use std::path::Path;

use serde_json::json;

use crate::container::Container;
use crate::error::{DampError, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptedEmbedding {
    pub v_prime: Vec<f64>,
    /// One prompted class embedding per row (`K x D`).
    pub s_prime: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub domain: usize,
    pub label: Option<usize>,
    pub v: Vec<f64>,
    pub v_tilde: Matrix<f64>,
    pub prompted: Option<PromptedEmbedding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    pub dim: usize,
    pub n_ctx: usize,
    pub spatial: usize,
    pub classes: usize,
    pub domains: Vec<String>,
    /// Class embeddings from the learned prompt (`K x D`).
    pub class_s: Matrix<f64>,
    /// Context outputs stacked per class (`K*N x D`).
    pub class_s_tilde: Matrix<f64>,
    /// Class embeddings from the fixed template prompt (`K x D`).
    pub naive_s: Matrix<f64>,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingArchive {
    pub fn validate(&self) -> Result<()> {
        let check = |what: &str, m: &Matrix<f64>, rows: usize| {
            if m.shape() != (rows, self.dim) {
                return Err(DampError::Format(format!(
                    "{what} is {}x{}, expected {rows}x{}",
                    m.rows(),
                    m.cols(),
                    self.dim
                )));
            }
            Ok(())
        };
        check("class_s", &self.class_s, self.classes)?;
        check("class_s_tilde", &self.class_s_tilde, self.classes * self.n_ctx)?;
        check("naive_s", &self.naive_s, self.classes)?;
        for (i, r) in self.records.iter().enumerate() {
            if r.v.len() != self.dim {
                return Err(DampError::Format(format!(
                    "record {i}: v has {} values, expected {}",
                    r.v.len(),
                    self.dim
                )));
            }
            check("v_tilde", &r.v_tilde, self.spatial)?;
            if r.domain >= self.domains.len() {
                return Err(DampError::Format(format!("record {i}: unknown domain {}", r.domain)));
            }
            if let Some(l) = r.label {
                if l >= self.classes {
                    return Err(DampError::Format(format!("record {i}: label {l} >= {}", self.classes)));
                }
            }
            if let Some(p) = &r.prompted {
                if p.v_prime.len() != self.dim {
                    return Err(DampError::Format(format!("record {i}: v_prime width mismatch")));
                }
                check("s_prime", &p.s_prime, self.classes)?;
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Result<Container> {
        self.validate()?;
        let prompted = self.records.iter().all(|r| r.prompted.is_some()) && !self.records.is_empty();
        let mut c = Container::new(
            "embeddings",
            json!({
                "dim": self.dim,
                "n_ctx": self.n_ctx,
                "spatial": self.spatial,
                "classes": self.classes,
                "records": self.records.len(),
                "domains": self.domains,
                "prompted": prompted,
            }),
        );
        c.push("class_s", self.class_s.clone());
        c.push("class_s_tilde", self.class_s_tilde.clone());
        c.push("naive_s", self.naive_s.clone());
        let n = self.records.len();
        let rows = |f: &dyn Fn(&EmbeddingRecord) -> Vec<f64>, width: usize| {
            let mut data = Vec::with_capacity(n * width);
            for r in &self.records {
                data.extend(f(r));
            }
            Matrix::from_vec(data.len() / width.max(1), width, data)
        };
        c.push(
            "domain",
            Matrix::row_vector(&self.records.iter().map(|r| r.domain as f64).collect::<Vec<_>>()),
        );
        c.push(
            "label",
            Matrix::row_vector(
                &self
                    .records
                    .iter()
                    .map(|r| r.label.map_or(-1.0, |l| l as f64))
                    .collect::<Vec<_>>(),
            ),
        );
        c.push("v", rows(&|r| r.v.clone(), self.dim)?);
        c.push("v_tilde", rows(&|r| r.v_tilde.as_slice().to_vec(), self.dim)?);
        if prompted {
            c.push("v_prime", rows(&|r| r.prompted.as_ref().unwrap().v_prime.clone(), self.dim)?);
            c.push(
                "s_prime",
                rows(&|r| r.prompted.as_ref().unwrap().s_prime.as_slice().to_vec(), self.dim)?,
            );
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind("embeddings")?;
        let dim = c.meta_usize("dim")?;
        let n_ctx = c.meta_usize("n_ctx")?;
        let spatial = c.meta_usize("spatial")?;
        let classes = c.meta_usize("classes")?;
        let n = c.meta_usize("records")?;
        let domains: Vec<String> = c
            .meta
            .get("domains")
            .and_then(|d| serde_json::from_value(d.clone()).ok())
            .ok_or_else(|| DampError::Format("metadata field 'domains' missing".into()))?;
        let prompted = c.meta.get("prompted").and_then(|p| p.as_bool()).unwrap_or(false);
        let expect = |name: &str, rows: usize, cols: usize| -> Result<&Matrix<f64>> {
            let m = c.get(name)?;
            if m.shape() != (rows, cols) {
                return Err(DampError::Format(format!(
                    "tensor '{name}' is {}x{}, header implies {rows}x{cols}",
                    m.rows(),
                    m.cols()
                )));
            }
            Ok(m)
        };
        let domain = expect("domain", 1, n)?;
        let label = expect("label", 1, n)?;
        let v = expect("v", n, dim)?;
        let v_tilde = expect("v_tilde", n * spatial, dim)?;
        let (v_prime, s_prime) = if prompted {
            (Some(expect("v_prime", n, dim)?), Some(expect("s_prime", n * classes, dim)?))
        } else {
            (None, None)
        };
        let records = (0..n)
            .map(|i| {
                let l = label.get(0, i);
                EmbeddingRecord {
                    domain: domain.get(0, i) as usize,
                    label: if l < 0.0 { None } else { Some(l as usize) },
                    v: v.row(i).to_vec(),
                    v_tilde: v_tilde.slice_rows(i * spatial, (i + 1) * spatial),
                    prompted: v_prime.zip(s_prime).map(|(vp, sp)| PromptedEmbedding {
                        v_prime: vp.row(i).to_vec(),
                        s_prime: sp.slice_rows(i * classes, (i + 1) * classes),
                    }),
                }
            })
            .collect();
        let archive = Self {
            dim,
            n_ctx,
            spatial,
            classes,
            domains,
            class_s: expect("class_s", classes, dim)?.clone(),
            class_s_tilde: expect("class_s_tilde", classes * n_ctx, dim)?.clone(),
            naive_s: expect("naive_s", classes, dim)?.clone(),
            records,
        };
        archive.validate()?;
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.write(path)
    }

    /// Indices of records belonging to `domain`.
    pub fn domain_records(&self, domain: usize) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].domain == domain)
            .collect()
    }
}

/// Reads an embedding archive; when `expected_dim` is given, a different
/// stored width is rejected with both values in the message.
pub fn ingest_embeddings(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<EmbeddingArchive> {
    let c = Container::read(path)?;
    c.expect_kind("embeddings")?;
    if let Some(d) = expected_dim {
        let stored = c.meta_usize("dim")?;
        if stored != d {
            return Err(DampError::Format(format!(
                "embedding dim mismatch: archive has D={stored}, configuration expects D={d}"
            )));
        }
    }
    EmbeddingArchive::from_container(&c)
}
