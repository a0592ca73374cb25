//! One mp-MRI exam with its region masks and supervision, and its on-disk form.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use ucfed_autograd::{Dense, Element, Tensor, TensorData};

use crate::container::{kind, Container, DecodeError};
use crate::losses::ExamTargets;
use crate::supervision::{GradeOneHot, SupervisionError, SupervisionMatrix, SIGNAL_LESION, SIGNAL_MAX_GRADE};

pub const EXAM_EXTENSION: &str = "fltc";
pub const META_EXTENSION: &str = "meta";

#[derive(Debug, Error)]
pub enum ExamError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: DecodeError,
    },
    #[error("{path}: bad metadata: {message}")]
    Meta { path: PathBuf, message: String },
    #[error("exam entry {name:?}: {message}")]
    Entry { name: &'static str, message: String },
    #[error(transparent)]
    Supervision(#[from] SupervisionError),
    #[error("exam {exam}: {message}")]
    Invariant { exam: String, message: String },
}

/// Sidecar text metadata stored next to each exam file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExamMeta {
    pub exam_id: String,
    pub profile: String,
    pub spacing: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exam {
    pub meta: ExamMeta,
    /// `3×X×Y×Z`: T2-like, DWI-like, ADC-like.
    pub image: Dense<f32>,
    pub gland: Dense<u8>,
    /// `R×X×Y×Z`.
    pub masks: Dense<u8>,
    pub supervision: SupervisionMatrix,
    pub grades: GradeOneHot,
    /// True per-region grade, used only for evaluation. It stays known even
    /// where the training supervision withholds it.
    pub truth: Vec<i8>,
}

fn entry<'a>(c: &'a Container, name: &'static str) -> Result<&'a Tensor, ExamError> {
    c.tensors.get(name).ok_or(ExamError::Entry {
        name,
        message: "missing".into(),
    })
}

fn bad(name: &'static str, message: impl Into<String>) -> ExamError {
    ExamError::Entry {
        name,
        message: message.into(),
    }
}

fn u8_tensor(shape: &[usize], data: &[u8]) -> Tensor {
    Tensor::new(shape.to_vec(), TensorData::U8(data.to_vec())).expect("dense shapes are consistent")
}

fn i32_tensor(shape: Vec<usize>, data: Vec<i32>) -> Tensor {
    Tensor::new(shape, TensorData::I32(data)).expect("dense shapes are consistent")
}

fn flip_x_in_place<T: Copy>(data: &mut [T], shape: &[usize]) {
    let (nx, ny, nz) = (shape[shape.len() - 3], shape[shape.len() - 2], shape[shape.len() - 1]);
    let plane = ny * nz;
    let vol = nx * plane;
    for chunk in data.chunks_exact_mut(vol) {
        for x in 0..nx / 2 {
            let (a, b) = (x * plane, (nx - 1 - x) * plane);
            for i in 0..plane {
                chunk.swap(a + i, b + i);
            }
        }
    }
}

fn flipped<T: Clone + Copy>(d: &Dense<T>) -> Dense<T> {
    let mut v = d.data().to_vec();
    flip_x_in_place(&mut v, d.shape());
    Dense::from_vec(d.shape().to_vec(), v)
}

impl Exam {
    pub fn id(&self) -> &str {
        &self.meta.exam_id
    }

    pub fn extent(&self) -> [usize; 3] {
        let s = self.gland.shape();
        [s[0], s[1], s[2]]
    }

    pub fn regions(&self) -> usize {
        self.supervision.len()
    }

    pub fn classes(&self) -> usize {
        self.grades.k()
    }

    pub fn image_as<T: Element>(&self) -> Dense<T> {
        self.image.cast()
    }

    pub fn targets(&self) -> ExamTargets {
        ExamTargets::new(&self.masks, self.supervision.clone(), self.classes())
    }

    /// Highest true grade over all regions (0 when benign).
    pub fn max_grade(&self) -> i8 {
        self.truth.iter().copied().max().unwrap_or(0).max(0)
    }

    /// Mirror along x. Image, gland and every region mask move together.
    pub fn flip_x(&self) -> Exam {
        Exam {
            meta: self.meta.clone(),
            image: flipped(&self.image),
            gland: flipped(&self.gland),
            masks: flipped(&self.masks),
            supervision: self.supervision.clone(),
            grades: self.grades.clone(),
            truth: self.truth.clone(),
        }
    }

    /// Checks mask containment, sextant partition and target consistency.
    pub fn validate(&self) -> Result<(), ExamError> {
        let fail = |message: String| ExamError::Invariant {
            exam: self.meta.exam_id.clone(),
            message,
        };
        let n = self.gland.len();
        let gland = self.gland.data();
        if self.masks.len() != self.regions() * n || self.image.len() != 3 * n {
            return Err(fail("image, gland and masks disagree in size".into()));
        }
        if self.truth.len() != self.regions() || self.grades.len() != self.regions() {
            return Err(fail("per-region vectors disagree in length".into()));
        }
        let mut sextant_cover = vec![0u8; n];
        let mut sextants = 0;
        for (r, row) in self.supervision.rows().iter().enumerate() {
            let m = &self.masks.data()[r * n..(r + 1) * n];
            if row.signal >= SIGNAL_LESION {
                if m.iter().all(|&v| v == 0) {
                    return Err(fail(format!("region {r} is supervised but empty")));
                }
                if m.iter().zip(gland).any(|(&a, &g)| a != 0 && g == 0) {
                    return Err(fail(format!("region {r} leaves the gland")));
                }
            }
            let whole_gland = m.iter().zip(gland).all(|(&a, &g)| (a != 0) == (g != 0));
            if row.signal == SIGNAL_MAX_GRADE && !whole_gland {
                sextants += 1;
                for (c, &a) in sextant_cover.iter_mut().zip(m) {
                    *c += u8::from(a != 0);
                }
            }
            if self.grades.class(r).is_some() != row.grade_known() {
                return Err(fail(format!("region {r}: grade row does not match supervision")));
            }
        }
        if sextants > 0 && sextant_cover.iter().zip(gland).any(|(&c, &g)| c != u8::from(g != 0)) {
            return Err(fail("sextants do not partition the gland".into()));
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let [x, y, z] = self.extent();
        let r = self.regions();
        Container::new(kind::DATA, 0, 1)
            .with("image", Tensor::from_dense(&self.image))
            .with("gland", u8_tensor(&[x, y, z], self.gland.data()))
            .with("masks", u8_tensor(&[r, x, y, z], self.masks.data()))
            .with("supervision", i32_tensor(vec![r, 2], self.supervision.to_i32()))
            .with(
                "grades",
                Tensor::new(vec![r, self.classes()], TensorData::F32(self.grades.to_matrix()))
                    .expect("one-hot matrix is R×K"),
            )
            .with("truth", i32_tensor(vec![r], self.truth.iter().map(|&g| g as i32).collect()))
    }

    pub fn from_container(c: &Container, meta: ExamMeta) -> Result<Exam, ExamError> {
        let image_t = entry(c, "image")?;
        let image: Dense<f32> = image_t.to_dense().map_err(|e| bad("image", e.to_string()))?;
        if image.rank() != 4 || image.shape()[0] != 3 {
            return Err(bad("image", format!("expected 3×X×Y×Z, got {:?}", image.shape())));
        }
        let vol = image.shape()[1..].to_vec();
        let gland_t = entry(c, "gland")?;
        let gland = gland_t.as_u8().ok_or_else(|| bad("gland", "not uint8"))?;
        if gland_t.shape() != vol.as_slice() {
            return Err(bad("gland", format!("shape {:?} does not match image", gland_t.shape())));
        }
        let masks_t = entry(c, "masks")?;
        let masks = masks_t.as_u8().ok_or_else(|| bad("masks", "not uint8"))?;
        if masks_t.shape().len() != 4 || masks_t.shape()[1..] != vol[..] {
            return Err(bad("masks", format!("shape {:?} does not match image", masks_t.shape())));
        }
        let r = masks_t.shape()[0];
        let sup_t = entry(c, "supervision")?;
        let sup = sup_t.as_i32().ok_or_else(|| bad("supervision", "not int32"))?;
        if sup_t.shape() != [r, 2] {
            return Err(bad("supervision", format!("expected {r}×2, got {:?}", sup_t.shape())));
        }
        let supervision = SupervisionMatrix::from_i32(sup)?;
        let grades_t = entry(c, "grades")?;
        let gv = grades_t.as_f32().ok_or_else(|| bad("grades", "not float32"))?;
        if grades_t.shape().len() != 2 || grades_t.shape()[0] != r {
            return Err(bad("grades", format!("expected {r}×K, got {:?}", grades_t.shape())));
        }
        let grades = GradeOneHot::from_matrix(gv, grades_t.shape()[1])?;
        let truth = match c.tensors.get("truth") {
            Some(t) => {
                let v = t.as_i32().ok_or_else(|| bad("truth", "not int32"))?;
                if v.len() != r || v.iter().any(|g| !(-1..=5).contains(g)) {
                    return Err(bad("truth", "expected R grades in -1..=5"));
                }
                v.iter().map(|&g| g as i8).collect()
            }
            None => supervision.rows().iter().map(|row| row.grade).collect(),
        };
        Ok(Exam {
            meta,
            gland: Dense::from_vec(vol.clone(), gland.to_vec()),
            masks: Dense::from_vec(masks_t.shape().to_vec(), masks.to_vec()),
            image,
            supervision,
            grades,
            truth,
        })
    }

    /// Writes `<dir>/<exam_id>.fltc` and its `.meta` sidecar.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, ExamError> {
        let path = dir.join(format!("{}.{EXAM_EXTENSION}", self.meta.exam_id));
        let meta_path = path.with_extension(META_EXTENSION);
        let meta = toml::to_string(&self.meta).map_err(|e| ExamError::Meta {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        fs::write(&path, self.to_container().encode()).map_err(|source| ExamError::Io {
            path: path.clone(),
            source,
        })?;
        fs::write(&meta_path, meta).map_err(|source| ExamError::Io {
            path: meta_path,
            source,
        })?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Exam, ExamError> {
        let bytes = fs::read(path).map_err(|source| ExamError::Io {
            path: path.into(),
            source,
        })?;
        let c = Container::decode(&bytes).map_err(|source| ExamError::Decode {
            path: path.into(),
            source,
        })?;
        let meta_path = path.with_extension(META_EXTENSION);
        let meta = match fs::read_to_string(&meta_path) {
            Ok(text) => toml::from_str(&text).map_err(|e| ExamError::Meta {
                path: meta_path,
                message: e.to_string(),
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => ExamMeta {
                exam_id: path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                profile: String::new(),
                spacing: [1.0; 3],
            },
            Err(source) => {
                return Err(ExamError::Io {
                    path: meta_path,
                    source,
                })
            }
        };
        let exam = Exam::from_container(&c, meta)?;
        exam.validate()?;
        Ok(exam)
    }
}
