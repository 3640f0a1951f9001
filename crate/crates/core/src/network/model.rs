use super::config::{BlockKind, ColumnLink, GridConfig, Head, InputMode};
use super::params::{Bound, ModelParams};
use crate::error::{Error, Result};
use crate::haze::{derived_inputs, DEFAULT_T_FLOOR};
use crate::tensor::{Graph, Real, Shape, Tensor, Var};

/// Shape of the features at one grid junction, recorded during forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct JunctionTrace {
    pub row: usize,
    pub col: usize,
    pub shape: Shape,
}

#[derive(Debug)]
pub struct NetOutput {
    /// Restored image `(n, 3, h, w)`, unclamped.
    pub image: Var,
    /// Indirect head only: transmission estimate `(n, 1, h, w)` in `(0, 1)`.
    pub transmission: Option<Var>,
    /// Indirect head only: atmospheric light estimate `(n, 1, 1, 1)`.
    pub airlight: Option<Var>,
    pub junctions: Vec<JunctionTrace>,
}

fn conv<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var, stride: usize, padding: usize) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    g.conv2d(x, w, b, stride, padding)
}

/// Residual dense block: `layers - 1` densely connected 3x3 convs with
/// ReLU, a 1x1 fusion back to the input width, then `x +`.
pub fn rdb_forward<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, layers: usize, x: Var) -> Result<Var> {
    let mut features = x;
    for k in 0..layers - 1 {
        let grown = conv(g, p, &format!("{prefix}.dense{k}"), features, 1, 1)?;
        let grown = g.relu(grown);
        features = g.concat_channels(features, grown)?;
    }
    let fused = conv(g, p, &format!("{prefix}.fuse"), features, 1, 0)?;
    g.add(x, fused)
}

/// `x + conv2(relu(conv1(x)))`.
pub fn residual_forward<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = conv(g, p, &format!("{prefix}.conv1"), x, 1, 1)?;
    let h = g.relu(h);
    let h = conv(g, p, &format!("{prefix}.conv2"), h, 1, 1)?;
    g.add(x, h)
}

/// Halve the spatial size, then double the channels.
pub fn downsample<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let s = g.shape(x);
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::shape("downsample", format!("spatial dims of {s} must be even")));
    }
    let h = conv(g, p, &format!("{prefix}.conv1"), x, 2, 1)?;
    let h = g.relu(h);
    let h = conv(g, p, &format!("{prefix}.conv2"), h, 1, 1)?;
    Ok(g.relu(h))
}

/// Double the spatial size with a transposed conv, then halve the channels.
pub fn upsample<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.conv1.weight"))?;
    let b = p.get(&format!("{prefix}.conv1.bias"))?;
    let h = g.conv_transpose2d(x, w, b, 2, 1, 1)?;
    let h = g.relu(h);
    let h = conv(g, p, &format!("{prefix}.conv2"), h, 1, 1)?;
    Ok(g.relu(h))
}

/// `a_row * row + a_col * col`, per channel (or one shared pair). Without
/// weights the two streams are simply added.
pub fn fuse<T: Real>(g: &mut Graph<T>, row: Var, col: Var, weights: Option<(Var, Var)>) -> Result<Var> {
    let (rs, cs) = (g.shape(row), g.shape(col));
    if rs != cs {
        return Err(Error::shape("fuse", format!("row stream {rs} vs column stream {cs}")));
    }
    match weights {
        None => g.add(row, col),
        Some((ar, ac)) => {
            let r = g.scale_channel(row, ar)?;
            let c = g.scale_channel(col, ac)?;
            g.add(r, c)
        }
    }
}

fn input_features<T: Real>(g: &mut Graph<T>, p: &Bound, config: &GridConfig, image: Var) -> Result<Var> {
    let c0 = config.channels(0);
    match config.input {
        InputMode::Learned => {
            let x = conv(g, p, "pre.conv", image, 1, 1)?;
            rdb_forward(g, p, "pre.rdb", config.rdb_layers, x)
        }
        InputMode::Derived => {
            let stack = derived_inputs(&g.value(image).cast::<f32>())?;
            Ok(g.constant(stack.cast::<T>()))
        }
        InputMode::RgbZeros => {
            let s = g.shape(image);
            if c0 == 3 {
                return Ok(image);
            }
            let zeros = g.constant(Tensor::zeros(Shape::new(s.n, c0 - 3, s.h, s.w)));
            g.concat_channels(image, zeros)
        }
    }
}

/// Run the network on `image` `(n, 3, h, w)` with `h, w` divisible by
/// `config.size_multiple()`.
pub fn forward<T: Real>(g: &mut Graph<T>, p: &Bound, config: &GridConfig, image: Var) -> Result<NetOutput> {
    config.validate()?;
    let s = g.shape(image);
    let m = config.size_multiple();
    if s.c != 3 {
        return Err(Error::shape("forward", format!("expected 3 input channels, got {s}")));
    }
    if s.h == 0 || s.w == 0 || s.h % m != 0 || s.w % m != 0 {
        return Err(Error::shape(
            "forward",
            format!("spatial dims {}x{} must be positive multiples of {m}", s.h, s.w),
        ));
    }

    let (rows, cols) = (config.rows, config.cols);
    let mut nodes: Vec<Vec<Option<Var>>> = vec![vec![None; cols]; rows];
    let mut junctions = Vec::new();
    nodes[0][0] = Some(input_features(g, p, config, image)?);
    junctions.push(JunctionTrace {
        row: 0,
        col: 0,
        shape: g.shape(nodes[0][0].unwrap()),
    });

    for col in 0..cols {
        let order: Vec<usize> = if col < cols / 2 {
            (0..rows).collect()
        } else {
            (0..rows).rev().collect()
        };
        for row in order {
            if row == 0 && col == 0 {
                continue;
            }
            let from_row = match (
                config.row_link(row, col),
                col.checked_sub(1).and_then(|c| nodes[row][c]),
            ) {
                (true, Some(prev)) => {
                    let prefix = format!("grid.r{row}.rdb{}", col - 1);
                    Some(match config.block {
                        BlockKind::ResidualDense => rdb_forward(g, p, &prefix, config.rdb_layers, prev)?,
                        BlockKind::Residual => residual_forward(g, p, &prefix, prev)?,
                    })
                }
                _ => None,
            };
            let from_col = match config.column_link(row, col) {
                Some(ColumnLink::Down) => match nodes[row - 1][col] {
                    Some(above) => Some(downsample(g, p, &format!("grid.down.r{row}.c{col}"), above)?),
                    None => None,
                },
                Some(ColumnLink::Up) => match nodes[row + 1][col] {
                    Some(below) => Some(upsample(g, p, &format!("grid.up.r{row}.c{col}"), below)?),
                    None => None,
                },
                None => None,
            };
            let node = match (from_row, from_col) {
                (Some(r), Some(c)) => {
                    let weights = if config.attention {
                        Some((
                            p.get(&format!("grid.att.r{row}.c{col}.row"))?,
                            p.get(&format!("grid.att.r{row}.c{col}.col"))?,
                        ))
                    } else {
                        None
                    };
                    Some(fuse(g, r, c, weights)?)
                }
                (r, c) => r.or(c),
            };
            if let Some(v) = node {
                junctions.push(JunctionTrace {
                    row,
                    col,
                    shape: g.shape(v),
                });
            }
            nodes[row][col] = node;
        }
    }

    let top = nodes[0][cols - 1].ok_or_else(|| Error::Config("grid output junction receives no data".into()))?;
    let x = rdb_forward(g, p, "post.rdb", config.rdb_layers, top)?;
    let out = conv(g, p, "post.conv", x, 1, 1)?;
    match config.head {
        Head::Direct => Ok(NetOutput {
            image: out,
            transmission: None,
            airlight: None,
            junctions,
        }),
        Head::Indirect => {
            let t_logit = g.narrow_channels(out, 0, 1)?;
            let t = g.sigmoid(t_logit);
            let a_map = g.narrow_channels(out, 1, 1)?;
            let a = g.mean_spatial(a_map);
            let restored = g.invert_haze(image, t, a, T::lit(DEFAULT_T_FLOOR as f64))?;
            Ok(NetOutput {
                image: restored,
                transmission: Some(t),
                airlight: Some(a),
                junctions,
            })
        }
    }
}

/// A configuration with its parameters, for inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: GridConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: GridConfig, params: ModelParams) -> Result<Self> {
        super::params::validate_params(&config, &params)?;
        Ok(Model { config, params })
    }

    /// Forward pass without gradient tracking; returns the raw (unclamped)
    /// output for inputs whose size is already a valid multiple.
    pub fn predict_raw(&self, hazy: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let bound = Bound::new(&mut g, &self.params, false);
        let x = g.constant(hazy.clone());
        let out = forward(&mut g, &bound, &self.config, x)?;
        Ok(g.value(out.image).clone())
    }

    /// Dehaze images of any size: reflect-pad to the grid multiple, run,
    /// crop back and clamp to `[0, 1]`.
    pub fn dehaze(&self, hazy: &Tensor<f32>) -> Result<Tensor<f32>> {
        let s = hazy.shape();
        let m = self.config.size_multiple();
        let (ph, pw) = (s.h.div_ceil(m) * m, s.w.div_ceil(m) * m);
        let padded = if (ph, pw) == (s.h, s.w) {
            hazy.clone()
        } else {
            hazy.pad_reflect(ph, pw)?
        };
        let out = self.predict_raw(&padded)?;
        let out = if (ph, pw) == (s.h, s.w) {
            out
        } else {
            out.crop(0, 0, s.h, s.w)?
        };
        out.ensure_finite("dehaze output")?;
        Ok(out.clamp(0.0, 1.0))
    }
}

/// Rewrite attention weights of a full grid so it computes exactly the
/// encoder-decoder route: the route's junctions keep only the stream that
/// lies on the route, every other fusion junction is switched off.
pub fn mask_to_encoder_decoder(config: &GridConfig, params: &mut ModelParams) -> Result<()> {
    if !config.attention {
        return Err(Error::Config("masking requires attention weights".into()));
    }
    let last_row = config.rows - 1;
    let last_col = config.cols - 1;
    for (row, col) in config.fusion_junctions() {
        let (ar, ac) = if row == last_row && col < config.cols / 2 {
            (1.0, 0.0)
        } else if col == last_col && row < last_row {
            (0.0, 1.0)
        } else {
            (0.0, 0.0)
        };
        for (side, v) in [("row", ar), ("col", ac)] {
            let t = params
                .get_mut(&format!("grid.att.r{row}.c{col}.{side}"))
                .ok_or_else(|| Error::Config(format!("missing attention weights at ({row}, {col})")))?;
            t.data_mut().fill(v);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::{apply_ablation, Ablation, AttentionMode};
    use crate::network::params::build;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: impl Into<Shape>, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = shape.into();
        Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn small() -> GridConfig {
        GridConfig::default()
            .with_base_channels(4)
            .with_growth(4)
            .with_rdb_layers(3)
    }

    fn run(config: &GridConfig, params: &ModelParams, x: &Tensor<f32>) -> (Tensor<f32>, Vec<JunctionTrace>) {
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, params, false);
        let xv = g.constant(x.clone());
        let out = forward(&mut g, &p, config, xv).unwrap();
        (g.value(out.image).clone(), out.junctions)
    }

    #[test]
    fn default_config_preserves_image_shape_and_obeys_shape_law() {
        let config = GridConfig::default();
        let params = build(&config, 1).unwrap();
        let (y, junctions) = run(&config, &params, &random([1, 3, 32, 32], 0));
        assert_eq!(y.shape(), Shape::new(1, 3, 32, 32));
        assert_eq!(junctions.len(), 18);
        for j in junctions {
            let c = config.channels_per_scale[j.row];
            assert_eq!(
                j.shape,
                Shape::new(1, c, 32 >> j.row, 32 >> j.row),
                "({}, {})",
                j.row,
                j.col
            );
        }
    }

    #[test]
    fn zero_rdb_is_identity() {
        let config = small();
        let mut params = build(&config, 2).unwrap();
        for (name, t) in params.iter_mut() {
            if name.starts_with("pre.rdb.") {
                t.data_mut().fill(0.0);
            }
        }
        let x = random([2, 4, 8, 8], 3);
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, &params, false);
        let xv = g.constant(x.clone());
        let y = rdb_forward(&mut g, &p, "pre.rdb", config.rdb_layers, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn rdb_rejects_wrong_channel_count() {
        let config = small();
        let params = build(&config, 2).unwrap();
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, &params, false);
        let xv = g.constant(random([1, 5, 8, 8], 0));
        assert!(matches!(
            rdb_forward(&mut g, &p, "pre.rdb", 3, xv),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn samplers_follow_the_factor_two_rule() {
        let config = GridConfig::default();
        let params = build(&config, 4).unwrap();
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, &params, false);
        let x = g.constant(random([1, 16, 64, 64], 5));
        let d = downsample(&mut g, &p, "grid.down.r1.c0", x).unwrap();
        assert_eq!(g.shape(d), Shape::new(1, 32, 32, 32));
        let u = upsample(&mut g, &p, "grid.up.r0.c5", d).unwrap();
        assert_eq!(g.shape(u), Shape::new(1, 16, 64, 64));
        let odd = g.constant(random([1, 16, 7, 8], 5));
        assert!(downsample(&mut g, &p, "grid.down.r1.c0", odd).is_err());
    }

    #[test]
    fn fuse_special_cases() {
        let mut g = Graph::<f32>::new();
        let r = g.constant(random([1, 3, 4, 4], 1));
        let c = g.constant(random([1, 3, 4, 4], 2));
        let one = g.constant(Tensor::full([1, 3, 1, 1], 1.0));
        let zero = g.constant(Tensor::zeros([1, 3, 1, 1]));
        let half = g.constant(Tensor::full([1, 3, 1, 1], 0.5));
        let y = fuse(&mut g, r, c, Some((one, zero))).unwrap();
        assert_eq!(g.value(y), g.value(r));
        let y = fuse(&mut g, r, r, Some((half, half))).unwrap();
        assert_eq!(g.value(y), g.value(r));
        let plain = fuse(&mut g, r, c, None).unwrap();
        let ones = fuse(&mut g, r, c, Some((one, one))).unwrap();
        assert_eq!(g.value(plain), g.value(ones));
        let other = g.constant(random([1, 3, 2, 4], 2));
        assert!(matches!(fuse(&mut g, r, other, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn forward_rejects_indivisible_sizes() {
        let config = small();
        let params = build(&config, 0).unwrap();
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, &params, false);
        let x = g.constant(random([1, 3, 18, 16], 0));
        let err = forward(&mut g, &p, &config, x).unwrap_err().to_string();
        assert!(err.contains("multiples of 4"), "{err}");
    }

    #[test]
    fn indirect_head_transmission_is_squashed() {
        let config = small().with_head(Head::Indirect);
        let params = build(&config, 6).unwrap();
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, &params, false);
        let x = g.constant(random([2, 3, 16, 16], 1));
        let out = forward(&mut g, &p, &config, x).unwrap();
        let t = g.value(out.transmission.unwrap());
        assert_eq!(t.shape(), Shape::new(2, 1, 16, 16));
        assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(g.shape(out.airlight.unwrap()), Shape::new(2, 1, 1, 1));
        assert_eq!(g.shape(out.image), Shape::new(2, 3, 16, 16));
    }

    #[test]
    fn masked_full_grid_equals_encoder_decoder() {
        let full = small();
        let ed = apply_ablation(&full, Ablation::EncoderDecoder).unwrap();
        let mut params = build(&full, 9).unwrap();
        mask_to_encoder_decoder(&full, &mut params).unwrap();
        let x = random([1, 3, 16, 16], 4);
        let (a, _) = run(&full, &params, &x);
        let ed_params: ModelParams = build(&ed, 0)
            .unwrap()
            .into_keys()
            .map(|k| {
                let v = params[&k].clone();
                (k, v)
            })
            .collect();
        let (b, _) = run(&ed, &ed_params, &x);
        assert!(a.max_abs_diff(&b) <= 1e-6, "{}", a.max_abs_diff(&b));
    }

    #[test]
    fn alternative_inputs_and_blocks_run() {
        let mut derived = GridConfig::default().with_grid(2, 2).with_growth(4).with_rdb_layers(2);
        derived.input = InputMode::Derived;
        let mut zeros = small();
        zeros.input = InputMode::RgbZeros;
        let plain = apply_ablation(&small(), Ablation::OriginalGridNetStyle).unwrap();
        let mut shared = small();
        shared.attention_mode = AttentionMode::Shared;
        for config in [derived, zeros, plain, shared] {
            let params = build(&config, 1).unwrap();
            assert!(!params.contains_key("pre.conv.weight") || config.input == InputMode::Learned);
            let (y, _) = run(&config, &params, &random([1, 3, 8, 8], 2));
            assert_eq!(y.shape(), Shape::new(1, 3, 8, 8));
            assert!(y.all_finite());
        }
    }

    #[test]
    fn dehaze_handles_any_size() {
        let config = small();
        let model = Model::new(config.clone(), build(&config, 3).unwrap()).unwrap();
        let y = model.dehaze(&random([1, 3, 13, 10], 1)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 13, 10));
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(y, model.dehaze(&random([1, 3, 13, 10], 1)).unwrap());
    }
}
