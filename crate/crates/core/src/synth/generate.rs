//! Two-site synthetic exam generator.
//!
//! Lesions brighten the DWI-like channel and darken the T2- and ADC-like
//! channels in proportion to grade. Each site sees that signal through its own
//! per-channel lesion gain, which is the non-iid factor between sites.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use ucfed_autograd::Dense;

use crate::exam::{Exam, ExamMeta};
use crate::supervision::{GradeOneHot, RegionSupervision, SupervisionMatrix, MAX_GRADE, SIGNAL_NONE, UNKNOWN_GRADE};
use crate::synth::normalize::normalize_channel;
use crate::synth::sextant::sextant_masks;

pub const SPACING_MM: [f64; 3] = [0.66, 0.66, 2.24];
pub const DEFAULT_EXTENT: [usize; 3] = [16, 16, 8];

/// Lesion contrast by ISUP grade group; grade 1 is faint, 2 and up are clear.
pub const GRADE_SIGNAL: [f64; 6] = [0.0, 0.35, 1.0, 1.3, 1.6, 1.9];

const GLAND_BASE: [f64; 3] = [1.0, 0.5, 1.0];
const BACKGROUND_BASE: [f64; 3] = [0.6, 0.2, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupervisionStyle {
    /// Per-lesion grades from targeted biopsy plus six sextant max grades.
    LesionGradesPlusSextants,
    /// Lesion contours without grades plus one exam-level max grade.
    ExamMaxGradeOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteProfile {
    pub name: String,
    /// Proportions over ISUP {0, 1, 2, 3–5}.
    pub grade_distribution: [f64; 4],
    pub supervision_style: SupervisionStyle,
    /// Scanner gain and offset per channel, applied before normalization.
    pub contrast_gain: [f64; 3],
    pub contrast_bias: [f64; 3],
    /// Signed per-channel lesion response; multiplied by the grade signal.
    pub lesion_gain: [f64; 3],
    pub noise_sd: f64,
    /// Inclusive lesion count range for exams with a nonzero max grade.
    pub lesion_count: (usize, usize),
    pub extent: [usize; 3],
    pub classes: usize,
}

impl SiteProfile {
    /// Lesion-graded site with DWI-dominant lesion contrast.
    pub fn ucsf_like() -> Self {
        SiteProfile {
            name: "ucsf-like".into(),
            grade_distribution: proportions([92, 222, 228, 137]),
            supervision_style: SupervisionStyle::LesionGradesPlusSextants,
            contrast_gain: [1.0, 1.2, 0.9],
            contrast_bias: [0.0, 0.1, 0.05],
            lesion_gain: [-0.3, 1.0, -0.1],
            noise_sd: 0.15,
            lesion_count: (1, 3),
            extent: DEFAULT_EXTENT,
            classes: 2,
        }
    }

    /// Exam-level-graded site with ADC-dominant lesion contrast.
    pub fn ucla_like() -> Self {
        SiteProfile {
            name: "ucla-like".into(),
            grade_distribution: proportions([196, 172, 197, 172]),
            supervision_style: SupervisionStyle::ExamMaxGradeOnly,
            contrast_gain: [0.8, 1.0, 1.1],
            contrast_bias: [0.2, 0.0, -0.1],
            lesion_gain: [-0.3, 0.1, -1.0],
            noise_sd: 0.15,
            lesion_count: (1, 3),
            extent: DEFAULT_EXTENT,
            classes: 2,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let total: f64 = self.grade_distribution.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.grade_distribution.iter().any(|&p| p < 0.0) {
            return Err(format!("grade distribution {:?} does not sum to 1", self.grade_distribution));
        }
        let (lo, hi) = self.lesion_count;
        if lo == 0 || lo > hi {
            return Err(format!("lesion count range {lo}..={hi} is empty or allows zero"));
        }
        if self.extent.iter().any(|&e| e < 4) || self.extent[2] < 4 {
            return Err(format!("extent {:?} too small", self.extent));
        }
        crate::supervision::check_class_count(self.classes).map_err(|e| e.to_string())?;
        if !(self.noise_sd > 0.0) {
            return Err("noise_sd must be positive".into());
        }
        Ok(())
    }
}

/// Normalizes integer counts into proportions.
pub fn proportions(counts: [u32; 4]) -> [f64; 4] {
    let total: u32 = counts.iter().sum();
    counts.map(|c| c as f64 / total as f64)
}

/// Grade bucket → a concrete max grade; bucket 3 covers grades 3 to 5.
pub fn grade_from_bucket<R: Rng>(bucket: usize, rng: &mut R) -> i8 {
    match bucket {
        0..=2 => bucket as i8,
        _ => rng.gen_range(3..=MAX_GRADE),
    }
}

pub fn bucket_of(grade: i8) -> usize {
    (grade.max(0) as usize).min(3)
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    fn rasterize(&self, extent: [usize; 3]) -> Vec<u8> {
        let [nx, ny, nz] = extent;
        let mut out = vec![0u8; nx * ny * nz];
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    out[(x * ny + y) * nz + z] = u8::from(self.contains([x, y, z]));
                }
            }
        }
        out
    }
}

/// Redraws until the gland spans the three slices sextants need; only thin
/// volumes ever take more than one draw.
fn sample_gland<R: Rng>(extent: [usize; 3], rng: &mut R) -> Vec<u8> {
    loop {
        let g = draw_gland(extent, rng);
        if sextant_masks(&g, extent).is_ok() {
            return g;
        }
    }
}

fn draw_gland<R: Rng>(extent: [usize; 3], rng: &mut R) -> Vec<u8> {
    let e = extent.map(|v| v as f64);
    let g = Ellipsoid {
        center: [
            (e[0] - 1.0) / 2.0 + rng.gen_range(-0.5..0.5),
            (e[1] - 1.0) / 2.0 + rng.gen_range(-0.5..0.5),
            (e[2] - 1.0) / 2.0 + rng.gen_range(-0.3..0.3),
        ],
        radii: [
            e[0] * rng.gen_range(0.34..0.41),
            e[1] * rng.gen_range(0.31..0.38),
            e[2] * rng.gen_range(0.36..0.43),
        ],
    };
    g.rasterize(extent)
}

/// Places one lesion inside the gland without touching earlier lesions.
fn sample_lesion<R: Rng>(gland: &[u8], taken: &[u8], extent: [usize; 3], rng: &mut R) -> Option<Vec<u8>> {
    let [_, ny, nz] = extent;
    let candidates: Vec<usize> = (0..gland.len()).filter(|&i| gland[i] != 0 && taken[i] == 0).collect();
    for _ in 0..64 {
        let &c = candidates.choose(rng)?;
        let center = [(c / (ny * nz)) as f64, ((c / nz) % ny) as f64, (c % nz) as f64];
        let ell = Ellipsoid {
            center,
            radii: [rng.gen_range(1.5..2.8), rng.gen_range(1.5..2.8), rng.gen_range(1.0..1.6)],
        };
        let mut m = ell.rasterize(extent);
        for (v, &g) in m.iter_mut().zip(gland) {
            *v &= g;
        }
        let size = m.iter().filter(|&&v| v != 0).count();
        let overlap = m.iter().zip(taken).any(|(&a, &b)| a != 0 && b != 0);
        if size >= 4 && !overlap {
            return Some(m);
        }
    }
    None
}

/// One exam whose maximum grade is drawn from the profile's distribution.
pub fn synth_exam<R: Rng>(profile: &SiteProfile, rng: &mut R) -> Exam {
    let weights = profile.grade_distribution;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut bucket = 3;
    for (b, &p) in weights.iter().enumerate() {
        acc += p;
        if u < acc {
            bucket = b;
            break;
        }
    }
    let grade = grade_from_bucket(bucket, rng);
    synth_exam_with_grade(profile, grade, rng)
}

/// One exam with a fixed maximum grade; grade 0 yields no lesions.
pub fn synth_exam_with_grade<R: Rng>(profile: &SiteProfile, max_grade: i8, rng: &mut R) -> Exam {
    let extent = profile.extent;
    let n: usize = extent.iter().product();
    let gland = sample_gland(extent, rng);

    let mut lesions: Vec<(Vec<u8>, i8)> = Vec::new();
    if max_grade > 0 {
        let count = rng.gen_range(profile.lesion_count.0..=profile.lesion_count.1);
        let mut taken = vec![0u8; n];
        for i in 0..count {
            let g = if i == 0 { max_grade } else { rng.gen_range(1..=max_grade) };
            match sample_lesion(&gland, &taken, extent, rng) {
                Some(m) => {
                    for (t, &v) in taken.iter_mut().zip(&m) {
                        *t |= v;
                    }
                    lesions.push((m, g));
                }
                None if i == 0 => panic!("gland too small to hold a lesion"),
                None => break,
            }
        }
    }

    let noise = Normal::new(0.0, profile.noise_sd).expect("validated noise level");
    let mut image = vec![0f32; 3 * n];
    for c in 0..3 {
        let mut signal = vec![0.0f64; n];
        for (m, g) in &lesions {
            let s = GRADE_SIGNAL[*g as usize] * profile.lesion_gain[c];
            for (v, &inside) in signal.iter_mut().zip(m) {
                if inside != 0 {
                    *v = s;
                }
            }
        }
        let raw: Vec<f32> = (0..n)
            .map(|i| {
                let base = if gland[i] != 0 { GLAND_BASE[c] } else { BACKGROUND_BASE[c] };
                let v = base + signal[i] + noise.sample(rng);
                (profile.contrast_gain[c] * v + profile.contrast_bias[c]) as f32
            })
            .collect();
        let normalized = normalize_channel(&raw, &gland).expect("noisy gland has contrast");
        image[c * n..(c + 1) * n].copy_from_slice(&normalized);
    }

    let mut rows = Vec::new();
    let mut truth = Vec::new();
    let mut masks: Vec<u8> = Vec::new();
    let known = profile.supervision_style == SupervisionStyle::LesionGradesPlusSextants;
    for (m, g) in &lesions {
        rows.push(RegionSupervision::lesion(if known { *g } else { UNKNOWN_GRADE }));
        truth.push(*g);
        masks.extend_from_slice(m);
    }
    match profile.supervision_style {
        SupervisionStyle::LesionGradesPlusSextants => {
            let sextants = sextant_masks(&gland, extent).expect("generated gland spans enough slices");
            for s in sextants {
                // A tiny gland can leave a sextant without voxels; nothing is biopsied there.
                if s.iter().all(|&v| v == 0) {
                    rows.push(RegionSupervision {
                        signal: SIGNAL_NONE,
                        grade: UNKNOWN_GRADE,
                    });
                    truth.push(0);
                    masks.extend_from_slice(&s);
                    continue;
                }
                let g = lesions
                    .iter()
                    .filter(|(m, _)| m.iter().zip(&s).any(|(&a, &b)| a != 0 && b != 0))
                    .map(|(_, g)| *g)
                    .max()
                    .unwrap_or(0);
                rows.push(RegionSupervision::max_grade(g));
                truth.push(g);
                masks.extend_from_slice(&s);
            }
        }
        SupervisionStyle::ExamMaxGradeOnly => {
            rows.push(RegionSupervision::max_grade(max_grade));
            truth.push(max_grade);
            masks.extend_from_slice(&gland);
        }
    }
    let supervision = SupervisionMatrix::new(rows).expect("generated rows are in range");
    let r = supervision.len();
    let [x, y, z] = extent;
    Exam {
        meta: ExamMeta {
            exam_id: profile.name.clone(),
            profile: profile.name.clone(),
            spacing: SPACING_MM,
        },
        image: Dense::from_vec(vec![3, x, y, z], image),
        gland: Dense::from_vec(vec![x, y, z], gland),
        masks: Dense::from_vec(vec![r, x, y, z], masks),
        grades: GradeOneHot::from_supervision(&supervision, profile.classes),
        supervision,
        truth,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supervision::{SIGNAL_LESION, SIGNAL_MAX_GRADE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn profiles_are_valid() {
        SiteProfile::ucsf_like().validate().unwrap();
        SiteProfile::ucla_like().validate().unwrap();
        let p = SiteProfile::ucsf_like().grade_distribution;
        assert!((p[0] - 0.1355).abs() < 1e-3 && (p[3] - 0.2018).abs() < 1e-3);
    }

    #[test]
    fn small_glands_leave_empty_sextants_unsupervised() {
        let mut p = SiteProfile::ucsf_like();
        p.extent = [8, 8, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut empty = 0;
        for _ in 0..300 {
            let e = synth_exam(&p, &mut rng);
            e.validate().unwrap();
            empty += e.supervision.rows().iter().filter(|r| r.signal == SIGNAL_NONE).count();
        }
        assert!(empty > 0, "no empty sextant in the sample");
    }

    #[test]
    fn lesion_site_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = synth_exam_with_grade(&SiteProfile::ucsf_like(), 4, &mut rng);
        e.validate().unwrap();
        let lesions = e.supervision.rows().iter().filter(|r| r.signal == SIGNAL_LESION).count();
        assert!((1..=3).contains(&lesions));
        assert_eq!(e.regions(), lesions + 6);
        assert_eq!(e.supervision.get(0).grade, 4);
        let sextant_max = e.supervision.rows()[lesions..].iter().map(|r| r.grade).max().unwrap();
        assert_eq!(sextant_max, 4);
    }

    #[test]
    fn exam_level_site_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = synth_exam_with_grade(&SiteProfile::ucla_like(), 2, &mut rng);
        e.validate().unwrap();
        let rows = e.supervision.rows();
        let gland_rows: Vec<_> = rows.iter().filter(|r| r.signal == SIGNAL_MAX_GRADE).collect();
        assert_eq!(gland_rows.len(), 1);
        assert_eq!(gland_rows[0].grade, 2);
        assert!(rows.iter().filter(|r| r.signal == SIGNAL_LESION).all(|r| r.grade == UNKNOWN_GRADE));
        assert_eq!(e.truth[0], 2);
    }

    #[test]
    fn benign_exam_has_no_lesions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let e = synth_exam_with_grade(&SiteProfile::ucsf_like(), 0, &mut rng);
        assert_eq!(e.regions(), 6);
        assert!(e.supervision.rows().iter().all(|r| r.grade == 0 && r.signal == SIGNAL_MAX_GRADE));
        let u = synth_exam_with_grade(&SiteProfile::ucla_like(), 0, &mut rng);
        assert_eq!(u.regions(), 1);
    }

    #[test]
    fn gland_channels_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = synth_exam(&SiteProfile::ucla_like(), &mut rng);
        let n = e.gland.len();
        for c in 0..3 {
            let v: Vec<f64> = (0..n)
                .filter(|&i| e.gland.data()[i] != 0)
                .map(|i| e.image.data()[c * n + i] as f64)
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4, "{mean} {var}");
        }
    }
}
