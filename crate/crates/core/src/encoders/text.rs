//! Frozen text side: per-class composite text features and attribute
//! embeddings, either synthesized from hashed strings or loaded from an
//! `FMVE` file of precomputed embeddings.
//!
//! File layout (little-endian):
//!
//! ```text
//! "FMVE" | version u32 | d_t u32 | class_count u32
//! per class: name_len u16 | name (UTF-8) | J u32 | J*d_t f32 (texts) | J*d_t f32 (attributes)
//! ```

use std::path::Path;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{checksum_all, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"FMVE";
pub const EMBEDDING_VERSION: u32 = 1;

/// Rows may deviate from unit norm by this much before being renormalized.
const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEmbedding<S> {
    pub name: String,
    /// Composite prompt features, J×d_t, unit rows.
    pub texts: Tensor<S>,
    /// Attribute-only embeddings fed to the prompt generator, J×d_t.
    pub attributes: Tensor<S>,
}

impl<S: Scalar> ClassEmbedding<S> {
    pub fn num_attributes(&self) -> usize {
        self.texts.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingStore<S> {
    d_t: usize,
    classes: Vec<ClassEmbedding<S>>,
}

fn normalize_rows_in_place<S: Scalar>(t: &mut Tensor<S>, force: bool) {
    let c = t.cols();
    for row in t.data_mut().chunks_mut(c) {
        let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        if n > S::zero() && (force || (n.as_f64() - 1.0).abs() > UNIT_TOL) {
            for v in row.iter_mut() {
                *v /= n;
            }
        }
    }
}

fn gaussian_vector(seed: u64, d: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("std");
    let mut r = rng::rng(seed);
    (0..d).map(|_| normal.sample(&mut r)).collect()
}

impl<S: Scalar> TextEmbeddingStore<S> {
    pub fn new(d_t: usize, classes: Vec<ClassEmbedding<S>>) -> Result<Self> {
        if d_t == 0 {
            return Err(Error::invalid("d_t must be positive"));
        }
        let mut classes = classes;
        for c in &mut classes {
            if c.texts.shape() != c.attributes.shape() || c.texts.cols() != d_t {
                return Err(Error::shape(
                    "text_store",
                    format!(
                        "class {}: texts {:?}, attributes {:?}, d_t {d_t}",
                        c.name,
                        c.texts.shape(),
                        c.attributes.shape()
                    ),
                ));
            }
            if !c.texts.is_finite() || !c.attributes.is_finite() {
                return Err(Error::NonFinite { op: "text_store" });
            }
            normalize_rows_in_place(&mut c.texts, false);
        }
        Ok(Self { d_t, classes })
    }

    /// Hash-seeded embeddings. Each attribute string maps to one Gaussian
    /// vector wherever it appears; each class name maps to another. Composite
    /// rows are `normalize(class + attribute)`, attribute rows are
    /// `normalize(attribute)`.
    pub fn synthesize(class_names: &[String], attributes_per_class: &[Vec<String>], d_t: usize, seed: u64) -> Result<Self> {
        if class_names.len() != attributes_per_class.len() {
            return Err(Error::invalid("one attribute list per class required"));
        }
        let mut classes = Vec::with_capacity(class_names.len());
        for (name, attrs) in class_names.iter().zip(attributes_per_class) {
            if attrs.is_empty() {
                return Err(Error::invalid(format!("class `{name}` has no attributes")));
            }
            let class_vec = gaussian_vector(rng::derive(seed, "class-text", &[rng::hash_str(name)]), d_t);
            let mut texts = Vec::with_capacity(attrs.len() * d_t);
            let mut attributes = Vec::with_capacity(attrs.len() * d_t);
            for a in attrs {
                let attr_vec = gaussian_vector(rng::derive(seed, "attribute-text", &[rng::hash_str(a)]), d_t);
                texts.extend(class_vec.iter().zip(&attr_vec).map(|(c, v)| S::lit(c + v)));
                attributes.extend(attr_vec.iter().map(|&v| S::lit(v)));
            }
            let mut texts = Tensor::matrix(attrs.len(), d_t, texts)?;
            let mut attributes = Tensor::matrix(attrs.len(), d_t, attributes)?;
            normalize_rows_in_place(&mut texts, true);
            normalize_rows_in_place(&mut attributes, true);
            classes.push(ClassEmbedding {
                name: name.clone(),
                texts,
                attributes,
            });
        }
        Self::new(d_t, classes)
    }

    pub fn d_t(&self) -> usize {
        self.d_t
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassEmbedding<S>] {
        &self.classes
    }

    pub fn class(&self, k: usize) -> &ClassEmbedding<S> {
        &self.classes[k]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// Stacks the attribute embeddings of `classes` into one matrix.
    pub fn attribute_matrix(&self, classes: &[usize]) -> Result<Tensor<S>> {
        if classes.is_empty() {
            return Err(Error::invalid("attribute matrix of an empty class set"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &k in classes {
            let c = self
                .classes
                .get(k)
                .ok_or_else(|| Error::invalid(format!("class index {k} not in text store")))?;
            data.extend_from_slice(c.attributes.data());
            rows += c.attributes.rows();
        }
        Tensor::matrix(rows, self.d_t, data)
    }

    pub fn checksum(&self) -> u64 {
        checksum_all(self.classes.iter().flat_map(|c| [&c.texts, &c.attributes]))
    }

    pub fn cast<T: Scalar>(&self) -> TextEmbeddingStore<T> {
        TextEmbeddingStore {
            d_t: self.d_t,
            classes: self
                .classes
                .iter()
                .map(|c| ClassEmbedding {
                    name: c.name.clone(),
                    texts: c.texts.cast(),
                    attributes: c.attributes.cast(),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.d_t as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes.len() as u32).to_le_bytes());
        for c in &self.classes {
            out.extend_from_slice(&(c.name.len() as u16).to_le_bytes());
            out.extend_from_slice(c.name.as_bytes());
            out.extend_from_slice(&(c.num_attributes() as u32).to_le_bytes());
            for t in [&c.texts, &c.attributes] {
                for &v in t.data() {
                    out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != EMBEDDING_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected FMVE".into(),
            });
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != EMBEDDING_VERSION {
            return Err(Error::Format {
                offset: version_at,
                msg: format!("unsupported version {version}"),
            });
        }
        let d_t = r.u32("d_t")? as usize;
        if d_t == 0 {
            return Err(Error::Format {
                offset: r.pos - 4,
                msg: "d_t is zero".into(),
            });
        }
        let count = r.u32("class_count")? as usize;
        let mut classes = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16("name_len")? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(name_len, "class name")?)
                .map_err(|_| Error::Format {
                    offset: name_at,
                    msg: "class name is not UTF-8".into(),
                })?
                .to_string();
            let j_at = r.pos;
            let j = r.u32("attribute count")? as usize;
            if j == 0 {
                return Err(Error::Format {
                    offset: j_at,
                    msg: format!("class `{name}` has zero attributes"),
                });
            }
            let mut read_matrix = |what: &str| -> Result<Tensor<S>> {
                let at = r.pos;
                let raw = r.take(j * d_t * 4, what)?;
                let vals: Vec<S> = raw
                    .chunks_exact(4)
                    .map(|b| S::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                    .collect();
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Format {
                        offset: at,
                        msg: format!("non-finite {what} for class `{name}`"),
                    });
                }
                Tensor::matrix(j, d_t, vals)
            };
            let texts = read_matrix("text features")?;
            let attributes = read_matrix("attribute embeddings")?;
            classes.push(ClassEmbedding {
                name,
                texts,
                attributes,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Self::new(d_t, classes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
