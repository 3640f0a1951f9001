use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{apply_haze, procedural_scene, synthetic_depth, transmission, DepthKind, DepthMap, HazeParams, ScenePair};
use crate::error::{Error, Result};
use crate::io::{format_sig, read_depth, read_image, write_depth, write_image};
use crate::tensor::Tensor;

pub const MANIFEST_HEADER: &str = "#gridhaze-manifest v1";

/// One synthesized pair and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub clear: PathBuf,
    pub depth: PathBuf,
    pub beta: f64,
    pub airlight: f64,
    pub hazy: PathBuf,
}

/// Ordered provenance records, one per hazy image.
///
/// Serialized as UTF-8 text: a header line followed by
/// `clear<TAB>depth<TAB>beta<TAB>A<TAB>hazy` records with reals printed to
/// six significant digits. Relative paths resolve against the manifest's
/// directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

fn path_field(p: &Path, line: usize) -> Result<String> {
    let s = p.to_str().ok_or_else(|| Error::Manifest {
        line,
        message: format!("path {} is not valid UTF-8", p.display()),
    })?;
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Manifest {
            line,
            message: format!("path {s:?} contains a tab or newline"),
        });
    }
    Ok(s.to_string())
}

impl DatasetManifest {
    pub fn to_text(&self) -> Result<String> {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 2;
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                path_field(&r.clear, line)?,
                path_field(&r.depth, line)?,
                format_sig(r.beta, 6),
                format_sig(r.airlight, 6),
                path_field(&r.hazy, line)?,
            )
            .expect("string write");
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::Manifest {
                    line: 1,
                    message: format!("missing `{MANIFEST_HEADER}` header"),
                })
            }
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Manifest {
                    line: line_no,
                    message: format!("expected 5 tab-separated fields, found {}", fields.len()),
                });
            }
            let real = |s: &str, what: &str| {
                s.parse::<f64>().map_err(|_| Error::Manifest {
                    line: line_no,
                    message: format!("{what} `{s}` is not a number"),
                })
            };
            records.push(ManifestRecord {
                clear: PathBuf::from(fields[0]),
                depth: PathBuf::from(fields[1]),
                beta: real(fields[2], "beta")?,
                airlight: real(fields[3], "atmospheric light")?,
                hazy: PathBuf::from(fields[4]),
            });
        }
        Ok(DatasetManifest { records })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// In-memory collection of scene pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<ScenePair>,
}

impl Dataset {
    pub fn new(pairs: Vec<ScenePair>) -> Self {
        Dataset { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Sampling ranges and depth model for synthesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub beta_range: (f32, f32),
    pub airlight_range: (f32, f32),
    pub depth_kind: DepthKind,
}

impl SynthOptions {
    /// Indoor protocol: `beta in [0.6, 1.8]`, `A in [0.7, 1.0]`.
    pub fn indoor() -> Self {
        SynthOptions {
            beta_range: (0.6, 1.8),
            airlight_range: (0.7, 1.0),
            depth_kind: DepthKind::Fractal,
        }
    }

    /// Outdoor protocol: `beta in [0.04, 0.2]`, `A in [0.8, 1.0]`.
    pub fn outdoor() -> Self {
        SynthOptions {
            beta_range: (0.04, 0.2),
            airlight_range: (0.8, 1.0),
            depth_kind: DepthKind::Fractal,
        }
    }

    fn validate(&self) -> Result<()> {
        let (b0, b1) = self.beta_range;
        let (a0, a1) = self.airlight_range;
        if !(b0 > 0.0 && b0 <= b1 && b1.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "beta range {b0}:{b1} must satisfy 0 < lo <= hi"
            )));
        }
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "atmospheric light range {a0}:{a1} must satisfy 0 < lo <= hi <= 1"
            )));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)) -> f32 {
    let u: f64 = rng.gen();
    if lo == hi {
        lo
    } else {
        (lo as f64 + (hi as f64 - lo as f64) * u) as f32
    }
}

/// Draw sample `index`'s haze parameters and depth seed from its own stream
/// so results do not depend on processing order.
fn draw(seed: u64, index: usize, opts: &SynthOptions) -> (HazeParams, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let beta = uniform(&mut rng, opts.beta_range);
    let airlight = uniform(&mut rng, opts.airlight_range);
    let depth_seed = rng.gen();
    (HazeParams::new(beta, airlight).expect("validated ranges"), depth_seed)
}

/// Synthesize `count` pairs in memory, cycling through `clears`.
pub fn synthesize_pairs(
    clears: &[Tensor<f32>],
    count: usize,
    opts: &SynthOptions,
    seed: u64,
) -> Result<Vec<ScenePair>> {
    opts.validate()?;
    if clears.is_empty() {
        return Err(Error::Dataset("no clear images to synthesize from".into()));
    }
    (0..count)
        .into_par_iter()
        .map(|i| {
            let clear = clears[i % clears.len()].clone();
            let s = clear.shape();
            let (params, depth_seed) = draw(seed, i, opts);
            let depth = synthetic_depth(s.h, s.w, opts.depth_kind, depth_seed)?;
            ScenePair::synthesize(clear, depth, params)
        })
        .collect()
}

/// In-memory dataset of `count` procedural scenes of size `h x w`, each
/// hazed once. Scene `i` uses its own seed derived from `seed`.
pub fn procedural_dataset(count: usize, h: usize, w: usize, opts: &SynthOptions, seed: u64) -> Result<Dataset> {
    let clears: Vec<Tensor<f32>> = (0..count)
        .map(|i| procedural_scene(h, w, seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64)))
        .collect();
    Ok(Dataset::new(synthesize_pairs(&clears, count, opts, seed)?))
}

fn clear_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("{} contains no .ppm images", dir.display())));
    }
    Ok(files)
}

/// Haze every `.ppm` in `clear_dir` (cycling until `count` pairs exist),
/// writing `depth_NNNN.pgm`, `hazy_NNNN.ppm` and `manifest.tsv` into
/// `out_dir`. The result is a pure function of the inputs and `seed`.
pub fn synth_dataset(
    clear_dir: impl AsRef<Path>,
    out_dir: impl AsRef<Path>,
    count: usize,
    opts: &SynthOptions,
    seed: u64,
) -> Result<DatasetManifest> {
    opts.validate()?;
    let (clear_dir, out_dir) = (clear_dir.as_ref(), out_dir.as_ref());
    let files = clear_images(clear_dir)?;
    let clears = files.iter().map(read_image).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let records = (0..count)
        .into_par_iter()
        .map(|i| {
            let clear = &clears[i % clears.len()];
            let s = clear.shape();
            let (params, depth_seed) = draw(seed, i, opts);
            let depth = synthetic_depth(s.h, s.w, opts.depth_kind, depth_seed)?;
            let t = transmission(&depth, params.beta())?;
            let hazy = apply_haze(clear, &t, params.airlight())?;
            let depth_name = PathBuf::from(format!("depth_{i:04}.pgm"));
            let hazy_name = PathBuf::from(format!("hazy_{i:04}.ppm"));
            write_depth(&depth, out_dir.join(&depth_name))?;
            write_image(&hazy, out_dir.join(&hazy_name))?;
            Ok(ManifestRecord {
                // Clear images inside the output directory are recorded
                // relative to it so the dataset can be moved as a whole.
                clear: files[i % files.len()]
                    .strip_prefix(out_dir)
                    .map_or_else(|_| files[i % files.len()].clone(), Path::to_path_buf),
                depth: depth_name,
                beta: params.beta() as f64,
                airlight: params.airlight() as f64,
                hazy: hazy_name,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest { records };
    manifest.write(out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load every pair a manifest file lists.
pub fn load_manifest_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest = DatasetManifest::read(manifest_path)?;
    if manifest.records.is_empty() {
        return Err(Error::Dataset(format!("{} lists no pairs", manifest_path.display())));
    }
    let pairs = manifest
        .records
        .iter()
        .map(|r| {
            let clear = read_image(resolve(base, &r.clear))?;
            let hazy = read_image(resolve(base, &r.hazy))?;
            let depth: DepthMap = read_depth(resolve(base, &r.depth))?;
            if clear.shape() != hazy.shape() || (depth.height(), depth.width()) != (clear.shape().h, clear.shape().w) {
                return Err(Error::Dataset(format!(
                    "{}: clear {}, hazy {} and depth {}x{} disagree",
                    r.hazy.display(),
                    clear.shape(),
                    hazy.shape(),
                    depth.height(),
                    depth.width()
                )));
            }
            Ok(ScenePair {
                clear,
                hazy,
                params: HazeParams::new(r.beta as f32, r.airlight as f32)?,
                depth,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { pairs })
}
