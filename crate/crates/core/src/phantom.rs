//! Seeded toy "organ" phantoms with complete ground truth, and the perfect
//! expert that revises predictions from it.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{
    AnnotationSet, ClassCatalog, ClassId, Image, Mask, MaskChannel, Provenance, Scan,
};
use crate::error::{Error, Result};

/// Ellipse template for one class, in coordinates normalised to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeTemplate {
    pub class: String,
    pub center_row: (f64, f64),
    pub center_col: (f64, f64),
    pub radius_row: (f64, f64),
    pub radius_col: (f64, f64),
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub templates: Vec<ShapeTemplate>,
    pub noise_sigma: f64,
    /// When set, the pairs in `touching_pairs` may overlap; every other pair
    /// of blobs is kept disjoint.
    pub allow_touching: bool,
    pub touching_pairs: Vec<(String, String)>,
}

const MIN_FRACTION: f64 = 0.01;
const MAX_FRACTION: f64 = 0.40;
const MAX_ATTEMPTS: usize = 200;

fn template(
    class: &str,
    center: (f64, f64),
    jitter: (f64, f64),
    radius_row: (f64, f64),
    radius_col: (f64, f64),
    intensity: f64,
) -> ShapeTemplate {
    ShapeTemplate {
        class: class.to_string(),
        center_row: (center.0 - jitter.0, center.0 + jitter.0),
        center_col: (center.1 - jitter.1, center.1 + jitter.1),
        radius_row,
        radius_col,
        intensity,
    }
}

impl PhantomSpec {
    /// Nine-organ abdominal layout on an `h×w` grid. Liver/gall bladder and
    /// postcava/aorta are the pairs allowed to touch.
    pub fn abdominal(height: usize, width: usize) -> Self {
        let j = (0.03, 0.03);
        let j2 = (0.02, 0.02);
        PhantomSpec {
            height,
            width,
            templates: vec![
                template("liver", (0.30, 0.27), j, (0.13, 0.16), (0.14, 0.17), 0.62),
                template("spleen", (0.30, 0.84), j2, (0.09, 0.11), (0.06, 0.08), 0.72),
                template(
                    "left_kidney",
                    (0.68, 0.80),
                    j,
                    (0.09, 0.11),
                    (0.06, 0.075),
                    0.92,
                ),
                template(
                    "right_kidney",
                    (0.68, 0.24),
                    j,
                    (0.09, 0.11),
                    (0.06, 0.075),
                    0.82,
                ),
                template(
                    "pancreas",
                    (0.52, 0.64),
                    (0.02, 0.02),
                    (0.04, 0.05),
                    (0.11, 0.14),
                    0.46,
                ),
                template(
                    "stomach",
                    (0.28, 0.58),
                    (0.03, 0.02),
                    (0.08, 0.10),
                    (0.08, 0.09),
                    0.30,
                ),
                template(
                    "postcava",
                    (0.70, 0.43),
                    j2,
                    (0.06, 0.075),
                    (0.06, 0.075),
                    0.38,
                ),
                template(
                    "aorta",
                    (0.70, 0.56),
                    j2,
                    (0.06, 0.075),
                    (0.06, 0.075),
                    0.54,
                ),
                template(
                    "gall_bladder",
                    (0.44, 0.36),
                    j2,
                    (0.06, 0.075),
                    (0.06, 0.075),
                    0.20,
                ),
            ],
            noise_sigma: 0.03,
            allow_touching: true,
            touching_pairs: vec![
                ("liver".into(), "gall_bladder".into()),
                ("postcava".into(), "aorta".into()),
            ],
        }
    }

    pub fn validate(&self, catalog: &ClassCatalog) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.height == 0 || self.width == 0 {
            return fail("grid dimensions must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma {} must be >= 0", self.noise_sigma));
        }
        let mut seen = BTreeSet::new();
        for t in &self.templates {
            catalog
                .id_of(&t.class)
                .map_err(|e| Error::Generation(e.to_string()))?;
            if !seen.insert(t.class.as_str()) {
                return fail(format!("duplicate template for {}", t.class));
            }
            if !(0.0..=1.0).contains(&t.intensity) {
                return fail(format!(
                    "{}: intensity {} outside [0, 1]",
                    t.class, t.intensity
                ));
            }
            for (lo, hi) in [t.center_row, t.center_col, t.radius_row, t.radius_col] {
                if !(lo <= hi && lo >= 0.0) {
                    return fail(format!("{}: bad range ({lo}, {hi})", t.class));
                }
            }
            if t.radius_row.0 <= 0.0 || t.radius_col.0 <= 0.0 {
                return fail(format!("{}: radii must be positive", t.class));
            }
            if t.center_row.0 - t.radius_row.1 < 0.0
                || t.center_row.1 + t.radius_row.1 > 1.0
                || t.center_col.0 - t.radius_col.1 < 0.0
                || t.center_col.1 + t.radius_col.1 > 1.0
            {
                return fail(format!("{}: shape does not fit inside the grid", t.class));
            }
        }
        if seen.len() != catalog.len() {
            return fail(format!(
                "templates cover {} of {} catalog classes",
                seen.len(),
                catalog.len()
            ));
        }
        for (a, b) in &self.touching_pairs {
            let ia = self.templates.iter().find(|t| &t.class == a);
            let ib = self.templates.iter().find(|t| &t.class == b);
            match (ia, ib) {
                (Some(x), Some(y)) if x.intensity + y.intensity <= 1.0 => {}
                (Some(_), Some(_)) => {
                    return fail(format!("touching pair {a}/{b}: intensities sum above 1"))
                }
                _ => return fail(format!("touching pair {a}/{b} names an unknown template")),
            }
        }
        Ok(())
    }

    fn may_touch(&self, a: &str, b: &str) -> bool {
        self.allow_touching
            && self
                .touching_pairs
                .iter()
                .any(|(x, y)| (x == a && y == b) || (x == b && y == a))
    }
}

fn rasterize(h: usize, w: usize, cy: f64, cx: f64, ry: f64, rx: f64) -> Mask {
    let mut m = Mask::filled(h, w, 0);
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            let d = ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2);
            if d <= 1.0 {
                m.set(r, c, 1);
            }
        }
    }
    m
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn seeded_rng(seed: u64) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("phantom:{seed}").as_bytes());
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// One phantom: a sum of seeded ellipses plus clipped Gaussian noise, with a
/// ground-truth channel per catalog class.
pub fn generate_phantom(seed: u64, spec: &PhantomSpec, catalog: &ClassCatalog) -> Result<Scan> {
    spec.validate(catalog)?;
    let (h, w) = (spec.height, spec.width);
    let n = (h * w) as f64;
    let mut rng = seeded_rng(seed);
    let mut masks: Option<Vec<Mask>> = None;
    'attempt: for _ in 0..MAX_ATTEMPTS {
        let mut drawn = Vec::with_capacity(spec.templates.len());
        for t in &spec.templates {
            let cy = uniform(&mut rng, t.center_row);
            let cx = uniform(&mut rng, t.center_col);
            let ry = uniform(&mut rng, t.radius_row);
            let rx = uniform(&mut rng, t.radius_col);
            drawn.push(rasterize(h, w, cy, cx, ry, rx));
        }
        for m in &drawn {
            let frac = m.foreground() as f64 / n;
            if !(MIN_FRACTION..=MAX_FRACTION).contains(&frac) {
                continue 'attempt;
            }
        }
        for i in 0..drawn.len() {
            for j in i + 1..drawn.len() {
                if spec.may_touch(&spec.templates[i].class, &spec.templates[j].class) {
                    continue;
                }
                let overlap = drawn[i]
                    .as_slice()
                    .iter()
                    .zip(drawn[j].as_slice())
                    .any(|(&a, &b)| a & b == 1);
                if overlap {
                    continue 'attempt;
                }
            }
        }
        masks = Some(drawn);
        break;
    }
    let masks = masks.ok_or_else(|| {
        Error::Generation(format!(
            "seed {seed}: no feasible layout after {MAX_ATTEMPTS} attempts"
        ))
    })?;

    let mut intensity = vec![0.0f64; h * w];
    for (t, m) in spec.templates.iter().zip(&masks) {
        for (v, &on) in intensity.iter_mut().zip(m.as_slice()) {
            if on == 1 {
                *v += t.intensity;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).expect("validated sigma");
        for v in intensity.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    let pixels = intensity.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    let image = Image::from_vec(h, w, pixels)?;

    let mut ground_truth = AnnotationSet::new();
    for (t, m) in spec.templates.iter().zip(masks) {
        ground_truth.insert(MaskChannel {
            class_id: catalog.id_of(&t.class)?,
            mask: m,
            provenance: Provenance::GroundTruth,
        });
    }
    Ok(Scan {
        scan_id: String::new(),
        image,
        ground_truth,
        annotations: BTreeMap::new(),
        seed,
    })
}

/// A generated split: scans sharing one grid size and catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: ClassCatalog,
    pub dims: (usize, usize),
    pub scans: Vec<Scan>,
}

impl Dataset {
    pub fn scan(&self, scan_id: &str) -> Option<&Scan> {
        self.scans.iter().find(|s| s.scan_id == scan_id)
    }

    pub fn scan_ids(&self) -> Vec<String> {
        self.scans.iter().map(|s| s.scan_id.clone()).collect()
    }

    /// Digest of the manifest-level content: ids, seeds, dims and catalog.
    pub fn manifest_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.catalog).expect("catalog serializes"));
        h.update(format!("{:?}", self.dims).as_bytes());
        for s in &self.scans {
            h.update(s.scan_id.as_bytes());
            h.update(s.seed.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Digest over every pixel of every image and mask.
    pub fn content_digest(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.scans {
            h.update(s.scan_id.as_bytes());
            for v in s.image.as_slice() {
                h.update(v.to_le_bytes());
            }
            for ch in s.ground_truth.channels() {
                h.update(ch.class_id.0.to_le_bytes());
                h.update(ch.mask.as_slice());
            }
        }
        hex::encode(h.finalize())
    }
}

/// `n_scans` phantoms named `scan_0000…` with seeds `seed + index`.
pub fn generate_dataset(
    seed: u64,
    n_scans: usize,
    spec: &PhantomSpec,
    catalog: &ClassCatalog,
) -> Result<Dataset> {
    generate_split("scan", seed, n_scans, spec, catalog)
}

/// As [`generate_dataset`] with a custom id prefix, so several splits can
/// coexist without id clashes.
pub fn generate_split(
    prefix: &str,
    seed: u64,
    n_scans: usize,
    spec: &PhantomSpec,
    catalog: &ClassCatalog,
) -> Result<Dataset> {
    if n_scans == 0 {
        return Err(Error::Contract("n_scans must be >= 1".into()));
    }
    spec.validate(catalog)?;
    let scans = (0..n_scans)
        .into_par_iter()
        .map(|i| {
            let mut scan = generate_phantom(seed.wrapping_add(i as u64), spec, catalog)?;
            scan.scan_id = format!("{prefix}_{i:04}");
            Ok(scan)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        catalog: catalog.clone(),
        dims: (spec.height, spec.width),
        scans,
    })
}

/// Simulated expert: replaces each requested channel of `predicted` with the
/// scan's ground truth, tagged as expert-revised. Other channels are copied.
pub fn oracle_revise(
    scan: &Scan,
    predicted: &AnnotationSet,
    classes_to_revise: &BTreeSet<ClassId>,
) -> Result<AnnotationSet> {
    let mut out = predicted.clone();
    for &k in classes_to_revise {
        let truth = scan
            .ground_truth
            .get(k)
            .ok_or_else(|| Error::Domain(format!("unknown class {k} for scan {}", scan.scan_id)))?;
        out.insert(MaskChannel {
            class_id: k,
            mask: truth.mask.clone(),
            provenance: Provenance::ExpertRevised,
        });
    }
    Ok(out)
}
