use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{AttentionMode, BlockKind, ColumnLink, GridConfig, Head, InputMode};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

/// Named parameter registry. Ordered by name so iteration, checkpoints and
/// optimizer state are deterministic.
pub type ModelParams = BTreeMap<String, Tensor<f32>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Fan(usize),
    Zero,
    Constant(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

struct Layout {
    specs: Vec<ParamSpec>,
}

impl Layout {
    fn conv(&mut self, prefix: &str, c_out: usize, c_in: usize, k: usize) {
        self.specs.push(ParamSpec {
            name: format!("{prefix}.weight"),
            shape: Shape::new(c_out, c_in, k, k),
            init: Init::Fan(c_in * k * k),
        });
        self.specs.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: Shape::new(1, c_out, 1, 1),
            init: Init::Zero,
        });
    }

    /// Transposed conv: weight is `(c_in, c_out, k, k)` as seen by the op,
    /// fan-in taken from the adjoint convolution.
    fn tconv(&mut self, prefix: &str, c_in: usize, c_out: usize, k: usize) {
        self.specs.push(ParamSpec {
            name: format!("{prefix}.weight"),
            shape: Shape::new(c_in, c_out, k, k),
            init: Init::Fan(c_in * k * k),
        });
        self.specs.push(ParamSpec {
            name: format!("{prefix}.bias"),
            shape: Shape::new(1, c_out, 1, 1),
            init: Init::Zero,
        });
    }

    fn row_block(&mut self, prefix: &str, config: &GridConfig, channels: usize) {
        match config.block {
            BlockKind::ResidualDense => self.rdb(prefix, config, channels),
            BlockKind::Residual => {
                self.conv(&format!("{prefix}.conv1"), channels, channels, 3);
                self.conv(&format!("{prefix}.conv2"), channels, channels, 3);
            }
        }
    }

    fn rdb(&mut self, prefix: &str, config: &GridConfig, channels: usize) {
        let g = config.growth_rate;
        for k in 0..config.rdb_layers - 1 {
            self.conv(&format!("{prefix}.dense{k}"), g, channels + k * g, 3);
        }
        self.conv(
            &format!("{prefix}.fuse"),
            channels,
            channels + (config.rdb_layers - 1) * g,
            1,
        );
    }
}

/// Every parameter the configuration needs, with shape and initializer.
/// A pure function of `config`.
pub fn layout(config: &GridConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let mut l = Layout { specs: Vec::new() };
    let c0 = config.channels(0);
    if config.input == InputMode::Learned {
        l.conv("pre.conv", c0, 3, 3);
        l.rdb("pre.rdb", config, c0);
    }
    let active = config.active_junctions();
    for row in 0..config.rows {
        let ch = config.channels(row);
        for col in 0..config.cols {
            if !active[row][col] {
                continue;
            }
            if config.row_link(row, col) && active[row][col - 1] {
                l.row_block(&format!("grid.r{row}.rdb{}", col - 1), config, ch);
            }
            match config.column_link(row, col) {
                Some(ColumnLink::Down) if active[row - 1][col] => {
                    let prev = config.channels(row - 1);
                    l.conv(&format!("grid.down.r{row}.c{col}.conv1"), prev, prev, 3);
                    l.conv(&format!("grid.down.r{row}.c{col}.conv2"), ch, prev, 3);
                }
                Some(ColumnLink::Up) if active[row + 1][col] => {
                    let next = config.channels(row + 1);
                    l.tconv(&format!("grid.up.r{row}.c{col}.conv1"), next, next, 3);
                    l.conv(&format!("grid.up.r{row}.c{col}.conv2"), ch, next, 3);
                }
                _ => {}
            }
        }
    }
    if config.attention {
        for (row, col) in config.fusion_junctions() {
            let width = match config.attention_mode {
                AttentionMode::PerChannel => config.channels(row),
                AttentionMode::Shared => 1,
            };
            for side in ["row", "col"] {
                l.specs.push(ParamSpec {
                    name: format!("grid.att.r{row}.c{col}.{side}"),
                    shape: Shape::new(1, width, 1, 1),
                    init: Init::Constant(0.5),
                });
            }
        }
    }
    l.rdb("post.rdb", config, c0);
    let out = match config.head {
        Head::Direct => 3,
        Head::Indirect => 2,
    };
    l.conv("post.conv", out, c0, 3);
    Ok(l.specs)
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Initialize every parameter of `config` from `seed`. Each parameter draws
/// from its own stream keyed by its name, so adding or removing one
/// parameter leaves the others unchanged.
pub fn build(config: &GridConfig, seed: u64) -> Result<ModelParams> {
    let mut params = ModelParams::new();
    for spec in layout(config)? {
        let n = spec.shape.numel();
        let data = match spec.init {
            Init::Zero => vec![0.0; n],
            Init::Constant(v) => vec![v; n],
            Init::Fan(fan_in) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(fnv1a(&spec.name));
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
            }
        };
        params.insert(spec.name, Tensor::from_vec(spec.shape, data)?);
    }
    Ok(params)
}

pub fn parameter_count(params: &ModelParams) -> usize {
    params.values().map(Tensor::len).sum()
}

/// Check that `params` holds exactly the parameters `config` needs.
pub fn validate_params(config: &GridConfig, params: &ModelParams) -> Result<()> {
    let specs = layout(config)?;
    for spec in &specs {
        match params.get(&spec.name) {
            None => return Err(Error::Config(format!("missing parameter `{}`", spec.name))),
            Some(t) if t.shape() != spec.shape => {
                return Err(Error::Config(format!(
                    "parameter `{}` has shape {}, expected {}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )))
            }
            _ => {}
        }
    }
    if params.len() != specs.len() {
        let known: std::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        let extra = params
            .keys()
            .find(|k| !known.contains(k.as_str()))
            .expect("extra parameter");
        return Err(Error::Config(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

/// Parameters placed on a graph, by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Put every parameter on `graph`; `track` makes them differentiable.
    pub fn new<T: Real>(graph: &mut Graph<T>, params: &ModelParams, track: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let value = t.cast::<T>();
                let v = if track {
                    graph.param(value)
                } else {
                    graph.constant(value)
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Bind already-converted tensors (used by double-precision checks).
    pub fn from_tensors<T: Real>(graph: &mut Graph<T>, params: &BTreeMap<String, Tensor<T>>, track: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if track {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    /// Gradients of every bound parameter, zero where nothing flowed.
    pub fn grads<T: Real>(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<f32>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = match graph.grad(v) {
                    Some(g) => g.cast::<f32>(),
                    None => Tensor::zeros(graph.shape(v)),
                };
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::{apply_ablation, Ablation};

    #[test]
    fn builds_are_deterministic() {
        let c = GridConfig::default();
        let a = build(&c, 7).unwrap();
        assert_eq!(a, build(&c, 7).unwrap());
        assert_ne!(a, build(&c, 8).unwrap());
        validate_params(&c, &a).unwrap();
    }

    #[test]
    fn single_row_has_no_scale_changes() {
        let c = GridConfig::default().with_grid(1, 4);
        let p = build(&c, 0).unwrap();
        assert!(p.keys().all(|k| !k.contains("down") && !k.contains("up")));
        assert!(p.keys().all(|k| !k.contains("att")));
        assert_eq!(
            p.keys()
                .filter(|k| k.starts_with("grid.r0.rdb") && k.ends_with("fuse.weight"))
                .count(),
            3
        );
    }

    #[test]
    fn default_layout_shapes() {
        let c = GridConfig::default();
        let p = build(&c, 0).unwrap();
        assert_eq!(p["pre.conv.weight"].shape(), Shape::new(16, 3, 3, 3));
        assert_eq!(p["pre.rdb.fuse.weight"].shape(), Shape::new(16, 16 + 4 * 16, 1, 1));
        assert_eq!(
            p["grid.r2.rdb4.dense3.weight"].shape(),
            Shape::new(16, 64 + 3 * 16, 3, 3)
        );
        assert_eq!(p["grid.down.r1.c0.conv1.weight"].shape(), Shape::new(16, 16, 3, 3));
        assert_eq!(p["grid.down.r1.c0.conv2.weight"].shape(), Shape::new(32, 16, 3, 3));
        assert_eq!(p["grid.up.r1.c5.conv1.weight"].shape(), Shape::new(64, 64, 3, 3));
        assert_eq!(p["grid.up.r1.c5.conv2.weight"].shape(), Shape::new(32, 64, 3, 3));
        assert_eq!(p["grid.att.r1.c3.row"].shape(), Shape::new(1, 32, 1, 1));
        assert_eq!(p["grid.att.r1.c3.row"].data()[0], 0.5);
        assert_eq!(p["post.conv.weight"].shape(), Shape::new(3, 16, 3, 3));
        // 15 row blocks, 2x3 down + 2x3 up samplers, 10 fusion junctions.
        assert_eq!(
            p.keys()
                .filter(|k| k.ends_with("fuse.weight") && k.starts_with("grid."))
                .count(),
            15
        );
        assert_eq!(p.keys().filter(|k| k.ends_with("conv1.weight")).count(), 12);
        assert_eq!(p.keys().filter(|k| k.starts_with("grid.att")).count(), 20);
    }

    #[test]
    fn weights_respect_the_fan_in_bound() {
        let p = build(&GridConfig::default(), 3).unwrap();
        let w = &p["grid.r0.rdb0.dense0.weight"];
        let bound = 1.0 / ((16 * 9) as f32).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(p["grid.r0.rdb0.dense0.bias"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_names_select_independent_streams() {
        let full = build(&GridConfig::default(), 5).unwrap();
        let ed_config = apply_ablation(&GridConfig::default(), Ablation::EncoderDecoder).unwrap();
        let ed = build(&ed_config, 5).unwrap();
        for (name, t) in &ed {
            assert_eq!(&full[name], t, "{name}");
        }
        assert!(ed.len() < full.len());
    }

    #[test]
    fn validation_names_the_problem() {
        let c = GridConfig::default().with_grid(2, 2);
        let mut p = build(&c, 0).unwrap();
        p.remove("post.conv.bias");
        let err = validate_params(&c, &p).unwrap_err().to_string();
        assert!(err.contains("post.conv.bias"), "{err}");
    }
}
