//! Python bindings: images, token grids, codebooks, packing, ColorAdapt,
//! mask sampling, trained modules, and the full command-line runner.

use std::path::PathBuf;

use clap::Parser;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use stok::augment::{self, AugSpec, CorruptionKind};
use stok::codec::{self, Codebook, EmbeddingGrid, TokenGrid};
use stok::image::Image;
use stok::model::{self, Classifier};
use stok::mtm::{self, MtmModel};
use stok::rng::seeded;
use stok::tokenadapt::{self, TokenAdaptModule};

fn py_err(e: stok::Error) -> PyErr {
    match e {
        stok::Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for stok::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "Image", module = "stok", from_py_object)]
#[derive(Clone)]
struct PyImage(Image);

#[pymethods]
impl PyImage {
    /// RGB image from `height * width * 3` interleaved bytes.
    #[new]
    fn new(height: usize, width: usize, rgb: &[u8]) -> PyResult<Self> {
        Image::from_rgb8(height, width, rgb).py().map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Image::load(&path).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).py()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    fn to_rgb8<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_rgb8())
    }

    /// Raw float pixels, row-major HWC.
    fn pixels(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.height, self.0.width)
    }
}

#[pyclass(name = "TokenGrid", module = "stok", from_py_object)]
#[derive(Clone)]
struct PyTokenGrid(TokenGrid);

#[pymethods]
impl PyTokenGrid {
    #[new]
    #[pyo3(signature = (h, w, indices, label=None))]
    fn new(h: usize, w: usize, indices: Vec<u32>, label: Option<u16>) -> PyResult<Self> {
        let mut g = TokenGrid::new(h, w, indices).py()?;
        g.label = label;
        Ok(Self(g))
    }

    #[getter]
    fn h(&self) -> usize {
        self.0.h
    }

    #[getter]
    fn w(&self) -> usize {
        self.0.w
    }

    #[getter]
    fn indices(&self) -> Vec<u32> {
        self.0.indices.clone()
    }

    #[getter]
    fn label(&self) -> Option<u16> {
        self.0.label
    }

    fn hflip(&self) -> Self {
        Self(self.0.hflip())
    }

    /// Fraction of positions holding the same token.
    fn agreement(&self, other: &PyTokenGrid) -> PyResult<f64> {
        self.0.agreement(&other.0).py()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __eq__(&self, other: &PyTokenGrid) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("TokenGrid({}x{}, label={:?})", self.0.h, self.0.w, self.0.label)
    }
}

#[pyclass(name = "EmbeddingGrid", module = "stok", from_py_object)]
#[derive(Clone)]
struct PyEmbeddingGrid(EmbeddingGrid);

#[pymethods]
impl PyEmbeddingGrid {
    #[new]
    fn new(h: usize, w: usize, d: usize, values: Vec<f32>) -> PyResult<Self> {
        EmbeddingGrid::new(h, w, d, values).py().map(Self)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.h, self.0.w, self.0.d)
    }

    #[getter]
    fn values(&self) -> Vec<f32> {
        self.0.values.clone()
    }

    fn __repr__(&self) -> String {
        format!("EmbeddingGrid({}x{}x{})", self.0.h, self.0.w, self.0.d)
    }
}

#[pyclass(name = "Codebook", module = "stok")]
struct PyCodebook(Codebook);

#[pymethods]
impl PyCodebook {
    /// `entries` is row-major `k * d`.
    #[new]
    fn new(entries: Vec<f32>, k: usize, d: usize) -> PyResult<Self> {
        Codebook::new(entries, k, d).py().map(Self)
    }

    /// k-means codebook over non-overlapping `patch x patch` patches.
    #[staticmethod]
    #[pyo3(signature = (images, patch=8, k=512, seed=0))]
    fn fit(images: Vec<PyImage>, patch: usize, k: usize, seed: u64) -> PyResult<Self> {
        let imgs: Vec<Image> = images.into_iter().map(|i| i.0).collect();
        codec::fit_toy_codebook(&imgs, patch, k, seed).py().map(Self)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let bytes = std::fs::read(&path).map_err(|e| PyOSError::new_err(format!("{}: {e}", path.display())))?;
        Codebook::from_bytes(&bytes).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        stok::nn::write_atomic(&path, &self.0.to_bytes()).py()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn id(&self) -> String {
        self.0.id().to_string()
    }

    #[getter]
    fn bits_per_token(&self) -> u32 {
        self.0.bits_per_token()
    }

    fn lookup(&self, grid: &PyTokenGrid) -> PyResult<PyEmbeddingGrid> {
        self.0.lookup(&grid.0).py().map(PyEmbeddingGrid)
    }

    fn quantize(&self, z: &PyEmbeddingGrid) -> PyResult<PyTokenGrid> {
        self.0.quantize(&z.0).py().map(PyTokenGrid)
    }

    #[pyo3(signature = (image, patch=8))]
    fn tokenize(&self, image: &PyImage, patch: usize) -> PyResult<PyTokenGrid> {
        codec::tokenize_image(&image.0, &self.0, patch).py().map(PyTokenGrid)
    }

    #[pyo3(signature = (grid, patch=8))]
    fn decode(&self, grid: &PyTokenGrid, patch: usize) -> PyResult<PyImage> {
        codec::decode_tokens(&grid.0, &self.0, patch).py().map(PyImage)
    }

    fn __repr__(&self) -> String {
        format!("Codebook(k={}, d={}, id={})", self.0.k(), self.0.d(), self.0.id())
    }
}

#[pyclass(name = "TokenAdapt", module = "stok")]
struct PyTokenAdapt(TokenAdaptModule);

#[pymethods]
impl PyTokenAdapt {
    #[staticmethod]
    fn load(path: PathBuf, codebook: &PyCodebook) -> PyResult<Self> {
        TokenAdaptModule::load(&path, &codebook.0).py().map(Self)
    }

    /// Applies a pixel-style operator (`hflip`, `rrc`, `affine`, `mixup`,
    /// `cutmix`) in token space. Mixing operators need `partner`.
    #[pyo3(signature = (grid, op, codebook, partner=None, seed=0))]
    fn apply(
        &self,
        grid: &PyTokenGrid,
        op: &str,
        codebook: &PyCodebook,
        partner: Option<PyTokenGrid>,
        seed: u64,
    ) -> PyResult<PyTokenGrid> {
        tokenadapt::apply_token_adapt(
            &grid.0,
            &AugSpec::new(op),
            partner.as_ref().map(|p| &p.0),
            &self.0,
            &codebook.0,
            &mut seeded(seed),
        )
        .py()
        .map(PyTokenGrid)
    }
}

/// The same operator draw as `TokenAdapt.apply` with equal `seed`, applied
/// to embeddings directly and re-quantized.
#[pyfunction]
#[pyo3(signature = (grid, op, codebook, partner=None, seed=0))]
fn naive_augment(
    grid: &PyTokenGrid,
    op: &str,
    codebook: &PyCodebook,
    partner: Option<PyTokenGrid>,
    seed: u64,
) -> PyResult<PyTokenGrid> {
    let op = AugSpec::new(op).pixel_op().py()?;
    let aug = op.sample((grid.0.h, grid.0.w), &mut seeded(seed));
    tokenadapt::naive_token_aug(&grid.0, &aug, partner.as_ref().map(|p| &p.0), &codebook.0)
        .py()
        .map(PyTokenGrid)
}

#[pyclass(name = "Classifier", module = "stok")]
struct PyClassifier(Classifier);

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Classifier::load(&path).py().map(Self)
    }

    #[getter]
    fn codebook_id(&self) -> String {
        self.0.codebook_id().to_string()
    }

    fn predict(&self, grids: Vec<PyTokenGrid>, codebook: &PyCodebook) -> PyResult<Vec<u32>> {
        let z = grids.iter().map(|g| codebook.0.lookup(&g.0)).collect::<stok::Result<Vec<_>>>().py()?;
        self.0.predict(&z).py()
    }

    /// Top-1 accuracy on labeled grids.
    fn evaluate(&self, grids: Vec<PyTokenGrid>, codebook: &PyCodebook) -> PyResult<f64> {
        let g: Vec<TokenGrid> = grids.into_iter().map(|g| g.0).collect();
        model::evaluate(&self.0, &g, &codebook.0).py()
    }
}

#[pyclass(name = "MtmModel", module = "stok")]
struct PyMtmModel(MtmModel);

#[pymethods]
impl PyMtmModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        MtmModel::load(&path).py().map(Self)
    }

    #[pyo3(signature = (grids, codebook, ratio=0.7, seed=0))]
    fn masked_accuracy(&self, grids: Vec<PyTokenGrid>, codebook: &PyCodebook, ratio: f64, seed: u64) -> PyResult<f64> {
        let g: Vec<TokenGrid> = grids.into_iter().map(|g| g.0).collect();
        mtm::masked_accuracy(&self.0, &g, &codebook.0, ratio, seed).py()
    }
}

/// `(image, label)` pairs of the procedural shape dataset.
#[pyfunction]
#[pyo3(signature = (n, size=64, seed=11))]
fn toy_dataset(n: usize, size: usize, seed: u64) -> PyResult<Vec<(PyImage, u16)>> {
    Ok(stok::toy::toy_dataset(n, size, seed)
        .py()?
        .into_iter()
        .map(|s| (PyImage(s.image), s.label))
        .collect())
}

#[pyfunction]
fn pack_tokens<'py>(py: Python<'py>, grids: Vec<PyTokenGrid>, k: usize) -> PyResult<Bound<'py, PyBytes>> {
    let g: Vec<TokenGrid> = grids.into_iter().map(|g| g.0).collect();
    Ok(PyBytes::new(py, &codec::pack_tokens(&g, k).py()?))
}

#[pyfunction]
fn unpack_tokens(payload: &[u8]) -> PyResult<Vec<PyTokenGrid>> {
    Ok(codec::unpack_tokens(payload).py()?.1.into_iter().map(PyTokenGrid).collect())
}

/// Packed body size in bytes, without the header.
#[pyfunction]
fn body_bytes(count: u64, h: usize, w: usize, k: usize) -> u64 {
    codec::pack::body_bytes(count, h, w, k)
}

#[pyfunction]
#[pyo3(signature = (z1, z2, eps=augment::DEFAULT_EPS))]
fn color_adapt(z1: &PyEmbeddingGrid, z2: &PyEmbeddingGrid, eps: f64) -> PyResult<PyEmbeddingGrid> {
    augment::color_adapt(&z1.0, &z2.0, eps).py().map(PyEmbeddingGrid)
}

/// `kind` is `gaussian_noise` or `gaussian_blur`; severity 1 to 5.
#[pyfunction]
#[pyo3(signature = (image, kind, severity, seed=0))]
fn corrupt(image: &PyImage, kind: &str, severity: u8, seed: u64) -> PyResult<PyImage> {
    let kind: CorruptionKind = kind.parse().py()?;
    augment::corrupt(&image.0, kind, severity, &mut seeded(seed)).py().map(PyImage)
}

#[pyfunction]
#[pyo3(signature = (n, seed=0, mean=0.7, std=0.25, lo=0.4, hi=1.0))]
fn sample_mask_ratios(n: usize, seed: u64, mean: f64, std: f64, lo: f64, hi: f64) -> PyResult<Vec<f64>> {
    let mut rng = seeded(seed);
    (0..n).map(|_| mtm::sample_mask_ratio(&mut rng, mean, std, lo, hi)).collect::<stok::Result<_>>().py()
}

/// Runs the `stok` command line in-process, e.g. `run(["stats", "-c", "run.toml"])`.
/// Returns the process exit code the binary would use.
#[pyfunction]
fn run(args: Vec<String>) -> PyResult<i32> {
    let cli = stok_cli::Cli::try_parse_from(std::iter::once("stok".to_string()).chain(args))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(match stok_cli::run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    })
}

#[pymodule]
#[pyo3(name = "stok")]
fn stok_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyTokenGrid>()?;
    m.add_class::<PyEmbeddingGrid>()?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyTokenAdapt>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyMtmModel>()?;
    m.add_function(wrap_pyfunction!(toy_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(pack_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(unpack_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(body_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(color_adapt, m)?)?;
    m.add_function(wrap_pyfunction!(corrupt, m)?)?;
    m.add_function(wrap_pyfunction!(sample_mask_ratios, m)?)?;
    m.add_function(wrap_pyfunction!(naive_augment, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
