//! Class-conditional blob images with shared attribute structure.
//!
//! Every attribute in the pool owns a Gaussian blob (position, width and
//! channel weights fixed by the attribute string and the dataset seed). A
//! class prototype is the sum of its attributes' blobs, so classes that share
//! attributes share visual structure. Samples add pixel noise; domains are
//! fixed affine pixel maps applied on top.

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::encoders::Image;
use crate::error::{Error, Result};
use crate::rng;

/// Affine pixel map `out_c = contrast * Σ mix[c][c'] in_c' + offset`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTransform {
    pub name: String,
    pub contrast: f64,
    pub offset: f64,
    /// C×C channel mix, row-major.
    pub mix: Vec<f64>,
}

impl DomainTransform {
    pub fn identity(name: &str, channels: usize) -> Self {
        let mut mix = vec![0.0; channels * channels];
        for c in 0..channels {
            mix[c * channels + c] = 1.0;
        }
        Self {
            name: name.to_string(),
            contrast: 1.0,
            offset: 0.0,
            mix,
        }
    }

    /// Built-in styles: `photo` (identity), `art`, `cartoon`, `sketch`.
    pub fn named(name: &str, channels: usize) -> Result<Self> {
        let mut t = Self::identity(name, channels);
        let (contrast, offset, bleed) = match name {
            "photo" => return Ok(t),
            "art" => (1.4, 0.2, 0.3),
            "cartoon" => (0.7, -0.3, 0.0),
            "sketch" => (-1.0, 0.5, 0.2),
            other => return Err(Error::Config(format!("unknown domain `{other}`"))),
        };
        t.contrast = contrast;
        t.offset = offset;
        if channels > 1 {
            for c in 0..channels {
                t.mix[c * channels + (c + 1) % channels] += bleed;
            }
        }
        Ok(t)
    }

    pub fn channels(&self) -> usize {
        (self.mix.len() as f64).sqrt() as usize
    }

    /// Determinant of the full linear part, `contrast^C · det(mix)`.
    pub fn determinant(&self) -> f64 {
        let c = self.channels();
        self.contrast.powi(c as i32) * determinant(&self.mix, c)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if c * c != self.mix.len() || c == 0 {
            return Err(Error::invalid(format!("domain `{}`: mix is not square", self.name)));
        }
        if self.determinant().abs() < 1e-9 {
            return Err(Error::invalid(format!("domain `{}` is not invertible", self.name)));
        }
        Ok(())
    }

    pub fn apply(&self, image: &Image) -> Image {
        let c = self.channels();
        let mut out = Image::zeros(image.channels(), image.height(), image.width());
        for y in 0..image.height() {
            for x in 0..image.width() {
                for o in 0..c {
                    let mut v = 0.0;
                    for i in 0..c {
                        v += self.mix[o * c + i] * image.get(i, y, x);
                    }
                    out.set(o, y, x, self.contrast * v + self.offset);
                }
            }
        }
        out
    }
}

fn determinant(m: &[f64], n: usize) -> f64 {
    let mut a = m.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        if a[pivot * n + col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
            }
            det = -det;
        }
        let p = a[col * n + col];
        det *= p;
        for r in col + 1..n {
            let f = a[r * n + col] / p;
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
        }
    }
    det
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub class_names: Vec<String>,
    pub attribute_pool: Vec<String>,
    /// Per class, indices into `attribute_pool`.
    pub class_attributes: Vec<Vec<usize>>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    pub blob_sigma: f64,
    pub domains: Vec<DomainTransform>,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::invalid("dataset has no classes"));
        }
        if self.class_attributes.len() != self.class_names.len() {
            return Err(Error::invalid(format!(
                "{} classes but {} attribute lists",
                self.class_names.len(),
                self.class_attributes.len()
            )));
        }
        for (k, attrs) in self.class_attributes.iter().enumerate() {
            if attrs.is_empty() {
                return Err(Error::invalid(format!("class `{}` has no attributes", self.class_names[k])));
            }
            if let Some(&a) = attrs.iter().find(|&&a| a >= self.attribute_pool.len()) {
                return Err(Error::invalid(format!("attribute index {a} outside pool")));
            }
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if self.train_per_class == 0 {
            return Err(Error::invalid("train_per_class must be positive"));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 || self.blob_sigma.is_nan() || self.blob_sigma <= 0.0 {
            return Err(Error::invalid("noise_std must be >= 0 and blob_sigma > 0"));
        }
        if self.domains.is_empty() {
            return Err(Error::invalid("at least one domain is required"));
        }
        for d in &self.domains {
            d.validate()?;
            if d.channels() != self.channels {
                return Err(Error::invalid(format!("domain `{}` mixes {} channels", d.name, d.channels())));
            }
        }
        Ok(())
    }

    pub fn attribute_names(&self, class: usize) -> Vec<String> {
        self.class_attributes[class]
            .iter()
            .map(|&a| self.attribute_pool[a].clone())
            .collect()
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d.name == name)
            .ok_or_else(|| Error::Config(format!("unknown domain `{name}`")))
    }
}

/// Draws `per_class` distinct pool indices for each class such that no two
/// classes get the same set (when the pool allows it).
pub fn random_attribute_map(num_classes: usize, pool: usize, per_class: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if per_class == 0 || per_class > pool {
        return Err(Error::invalid(format!("cannot draw {per_class} attributes from a pool of {pool}")));
    }
    let mut r = rng::child_rng(seed, "attribute-map", &[]);
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut set = Vec::new();
        for _attempt in 0..64 {
            set = index::sample(&mut r, pool, per_class).into_vec();
            set.sort_unstable();
            if !out.contains(&set) {
                break;
            }
        }
        out.push(set);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub domain: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    spec: DatasetSpec,
    prototypes: Vec<Image>,
    /// Base-domain samples; other domains are derived on demand.
    train: Vec<Sample>,
    test: Vec<Sample>,
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    weights: Vec<f64>,
}

fn blob_for(attribute: &str, spec: &DatasetSpec) -> Blob {
    let mut r = rng::child_rng(spec.seed, "blob", &[rng::hash_str(attribute)]);
    Blob {
        cy: r.random_range(0.0..spec.height as f64),
        cx: r.random_range(0.0..spec.width as f64),
        sigma: spec.blob_sigma * r.random_range(0.75..1.25),
        weights: (0..spec.channels).map(|_| r.random_range(0.25..1.0)).collect(),
    }
}

/// Prototype of a set of attributes: the sum of their blobs, standardized to
/// zero mean and unit variance over all pixels.
pub fn prototype(spec: &DatasetSpec, attributes: &[usize]) -> Image {
    let mut img = Image::zeros(spec.channels, spec.height, spec.width);
    for &a in attributes {
        let b = blob_for(&spec.attribute_pool[a], spec);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let d2 = (y as f64 - b.cy).powi(2) + (x as f64 - b.cx).powi(2);
                let g = (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                for (c, w) in b.weights.iter().enumerate() {
                    let v = img.get(c, y, x) + w * g;
                    img.set(c, y, x, v);
                }
            }
        }
    }
    let (mean, std) = (img.mean(), img.std());
    if std > 0.0 {
        for v in img.data_mut() {
            *v = (*v - mean) / std;
        }
    }
    img
}

/// Pearson correlation between two images' pixels.
pub fn correlation(a: &Image, b: &Image) -> f64 {
    let (ma, mb) = (a.mean(), b.mean());
    let mut num = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    num / (va * vb).sqrt()
}

pub fn make_synthetic_dataset(spec: DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let prototypes: Vec<Image> = spec.class_attributes.iter().map(|a| prototype(&spec, a)).collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let draw = |split: Split, count: usize| -> Vec<Sample> {
        let mut out = Vec::with_capacity(prototypes.len() * count);
        for (k, proto) in prototypes.iter().enumerate() {
            for i in 0..count {
                let mut r = rng::child_rng(spec.seed, "sample", &[split as u64, k as u64, i as u64]);
                let mut img = proto.clone();
                if spec.noise_std > 0.0 {
                    for v in img.data_mut() {
                        *v += noise.sample(&mut r);
                    }
                }
                out.push(Sample {
                    image: img,
                    label: k,
                    domain: 0,
                });
            }
        }
        out
    };
    let train = draw(Split::Train, spec.train_per_class);
    let test = draw(Split::Test, spec.test_per_class);
    Ok(Dataset {
        spec,
        prototypes,
        train,
        test,
    })
}

impl Dataset {
    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes()
    }

    pub fn prototypes(&self) -> &[Image] {
        &self.prototypes
    }

    fn base(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Samples of `classes` from one split, rendered in `domain`.
    pub fn samples(&self, split: Split, classes: &[usize], domain: usize) -> Result<Vec<Sample>> {
        let t = self
            .spec
            .domains
            .get(domain)
            .ok_or_else(|| Error::invalid(format!("domain index {domain} out of range")))?;
        if let Some(&k) = classes.iter().find(|&&k| k >= self.num_classes()) {
            return Err(Error::invalid(format!("class {k} out of range")));
        }
        let identity = *t == DomainTransform::identity(&t.name, self.spec.channels);
        Ok(self
            .base(split)
            .iter()
            .filter(|s| classes.contains(&s.label))
            .map(|s| Sample {
                image: if identity { s.image.clone() } else { t.apply(&s.image) },
                label: s.label,
                domain,
            })
            .collect())
    }

    /// Every base-domain image under the name `img/<class>/<idx>` (train
    /// split first, then test with indices continuing).
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let mut counters = vec![0usize; self.num_classes()];
        for s in self.train.iter().chain(&self.test) {
            let i = counters[s.label];
            counters[s.label] += 1;
            let img = &s.image;
            let t = Tensor::new(vec![img.channels(), img.height(), img.width()], img.data().to_vec())?;
            ck.push(format!("img/{}/{i}", self.spec.class_names[s.label]), &t)?;
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: f64) -> DatasetSpec {
        DatasetSpec {
            class_names: (0..4).map(|k| format!("class{k}")).collect(),
            attribute_pool: (0..6).map(|a| format!("attr{a}")).collect(),
            class_attributes: vec![vec![0, 1], vec![0, 1], vec![2, 3], vec![4, 5]],
            train_per_class: 3,
            test_per_class: 2,
            channels: 2,
            height: 8,
            width: 8,
            noise_std: noise,
            blob_sigma: 1.5,
            domains: vec![DomainTransform::identity("photo", 2), DomainTransform::named("sketch", 2).unwrap()],
            seed: 11,
        }
    }

    #[test]
    fn shared_attributes_share_prototypes() {
        let d = make_synthetic_dataset(spec(0.1)).unwrap();
        assert!(correlation(&d.prototypes()[0], &d.prototypes()[1]) > 0.9);
        assert!(correlation(&d.prototypes()[0], &d.prototypes()[3]) < 0.9);
    }

    #[test]
    fn zero_noise_samples_equal_prototype() {
        let d = make_synthetic_dataset(spec(0.0)).unwrap();
        let s = d.samples(Split::Train, &[2], 0).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| x.image == d.prototypes()[2]));
    }

    #[test]
    fn identity_domain_is_a_no_op() {
        let d = make_synthetic_dataset(spec(0.2)).unwrap();
        let t = DomainTransform::identity("x", 2);
        let s = &d.samples(Split::Test, &[1], 0).unwrap()[0];
        assert_eq!(t.apply(&s.image), s.image);
        let sk = d.samples(Split::Test, &[1], 1).unwrap();
        assert_ne!(sk[0].image, s.image);
        assert_eq!(sk[0].domain, 1);
    }

    #[test]
    fn singular_domains_rejected() {
        let mut t = DomainTransform::identity("flat", 2);
        t.mix = vec![1.0, 2.0, 2.0, 4.0];
        assert!(t.validate().is_err());
        t.mix = vec![1.0, 0.0, 0.0, 1.0];
        t.contrast = 0.0;
        assert!(t.validate().is_err());
        for name in ["photo", "art", "cartoon", "sketch"] {
            DomainTransform::named(name, 3).unwrap().validate().unwrap();
        }
        assert!(DomainTransform::named("oil", 1).is_err());
    }

    #[test]
    fn determinant_of_known_matrices() {
        assert_eq!(determinant(&[2.0, 0.0, 0.0, 3.0], 2), 6.0);
        assert_eq!(determinant(&[0.0, 1.0, 1.0, 0.0], 2), -1.0);
        assert!((determinant(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 10.0], 3) + 3.0).abs() < 1e-12);
    }

    #[test]
    fn attribute_maps_are_distinct() {
        let m = random_attribute_map(16, 8, 2, 5).unwrap();
        for i in 0..16 {
            assert_eq!(m[i].len(), 2);
            for j in 0..i {
                assert_ne!(m[i], m[j]);
            }
        }
        assert!(random_attribute_map(3, 2, 3, 0).is_err());
    }

    #[test]
    fn dump_names() {
        let d = make_synthetic_dataset(spec(0.0)).unwrap();
        let ck = d.to_checkpoint().unwrap();
        assert_eq!(ck.len(), 4 * 5);
        assert!(ck.get("img/class2/4").is_some());
        assert_eq!(ck.get("img/class0/0").unwrap().shape(), &[2, 8, 8]);
    }
}
