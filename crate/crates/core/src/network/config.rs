use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haze::DERIVED_CHANNELS;

/// What the output convolution predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// The clear image itself.
    Direct,
    /// A transmission map and an atmospheric light, inverted through the
    /// haze model.
    Indirect,
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Head::Direct),
            "indirect" => Ok(Head::Indirect),
            other => Err(Error::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// One weight pair per channel at every fusion junction.
    PerChannel,
    /// One weight pair per fusion junction, shared by all channels.
    Shared,
}

/// Which links of the grid carry data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Routing {
    Grid,
    /// Down the first column, along the bottom row, up the last column.
    EncoderDecoder,
}

/// Block placed between adjacent column junctions of a row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    ResidualDense,
    /// Two 3x3 convolutions with a skip connection.
    Residual,
}

/// Source of the features entering the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Trainable conv + residual dense block.
    Learned,
    /// The fixed 16-channel hand-crafted stack.
    Derived,
    /// RGB followed by all-zero maps.
    RgbZeros,
}

/// Direction of a column link arriving at a junction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColumnLink {
    /// From the row above (finer scale).
    Down,
    /// From the row below (coarser scale).
    Up,
}

/// Architecture description. Every parameter shape is a pure function of
/// this value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub rows: usize,
    pub cols: usize,
    pub channels_per_scale: Vec<usize>,
    /// Convolutions per residual dense block, the last being the 1x1 fusion.
    pub rdb_layers: usize,
    pub growth_rate: usize,
    pub attention: bool,
    pub attention_mode: AttentionMode,
    pub exchange_branches: bool,
    pub routing: Routing,
    pub block: BlockKind,
    pub input: InputMode,
    pub head: Head,
}

impl Default for GridConfig {
    /// Three rows, six columns, 16/32/64 channels, growth rate 16.
    fn default() -> Self {
        GridConfig {
            rows: 3,
            cols: 6,
            channels_per_scale: vec![16, 32, 64],
            rdb_layers: 5,
            growth_rate: 16,
            attention: true,
            attention_mode: AttentionMode::PerChannel,
            exchange_branches: true,
            routing: Routing::Grid,
            block: BlockKind::ResidualDense,
            input: InputMode::Learned,
            head: Head::Direct,
        }
    }
}

impl GridConfig {
    /// Rows and columns changed; channels keep doubling from the current
    /// first-scale width.
    pub fn with_grid(mut self, rows: usize, cols: usize) -> Self {
        let base = self.channels_per_scale.first().copied().unwrap_or(16);
        self.rows = rows;
        self.cols = cols;
        self.channels_per_scale = (0..rows).map(|s| base << s).collect();
        self
    }

    pub fn with_base_channels(mut self, base: usize) -> Self {
        self.channels_per_scale = (0..self.rows).map(|s| base << s).collect();
        self
    }

    pub fn with_growth(mut self, growth_rate: usize) -> Self {
        self.growth_rate = growth_rate;
        self
    }

    pub fn with_rdb_layers(mut self, layers: usize) -> Self {
        self.rdb_layers = layers;
        self
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.rows == 0 {
            return fail("rows must be at least 1".into());
        }
        if self.cols < 2 || self.cols % 2 != 0 {
            return fail(format!("columns must be even and at least 2, got {}", self.cols));
        }
        if self.channels_per_scale.len() != self.rows {
            return fail(format!(
                "{} channel widths given for {} rows",
                self.channels_per_scale.len(),
                self.rows
            ));
        }
        if self.channels_per_scale[0] == 0 {
            return fail("channel widths must be positive".into());
        }
        for (s, pair) in self.channels_per_scale.windows(2).enumerate() {
            if pair[1] != 2 * pair[0] {
                return fail(format!(
                    "scale {} has {} channels, expected twice the {} of scale {s}",
                    s + 1,
                    pair[1],
                    pair[0]
                ));
            }
        }
        if self.rdb_layers < 2 {
            return fail(format!(
                "residual dense blocks need at least 2 layers, got {}",
                self.rdb_layers
            ));
        }
        if self.growth_rate == 0 {
            return fail("growth rate must be positive".into());
        }
        match self.input {
            InputMode::Derived if self.channels_per_scale[0] != DERIVED_CHANNELS => fail(format!(
                "derived inputs provide {} channels but the first scale has {}",
                DERIVED_CHANNELS, self.channels_per_scale[0]
            )),
            InputMode::RgbZeros if self.channels_per_scale[0] < 3 => {
                fail("RGB inputs need at least 3 first-scale channels".into())
            }
            _ => Ok(()),
        }
    }

    /// Blocks per row: one between each pair of adjacent columns.
    pub fn rdb_per_row(&self) -> usize {
        self.cols - 1
    }

    /// Spatial dimensions must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.rows - 1)
    }

    pub fn channels(&self, row: usize) -> usize {
        self.channels_per_scale[row]
    }

    /// Whether row `row` carries data from column `col - 1` into `col`.
    pub fn row_link(&self, row: usize, col: usize) -> bool {
        if col == 0 || col >= self.cols {
            return false;
        }
        match self.routing {
            Routing::Grid => true,
            Routing::EncoderDecoder => row == self.rows - 1,
        }
    }

    /// Column link arriving at junction `(row, col)`, if any. Columns in
    /// the first half downsample, the rest upsample.
    pub fn column_link(&self, row: usize, col: usize) -> Option<ColumnLink> {
        let first_half = col < self.cols / 2;
        let structural = if first_half { row >= 1 } else { row + 1 < self.rows };
        if !structural {
            return None;
        }
        let edge = col == 0 || col == self.cols - 1;
        let allowed = match self.routing {
            Routing::Grid => self.exchange_branches || edge,
            Routing::EncoderDecoder => edge,
        };
        allowed.then_some(if first_half { ColumnLink::Down } else { ColumnLink::Up })
    }

    /// Junctions that receive data, as `active[row][col]`, following the
    /// evaluation order (first-half columns top-down, second-half bottom-up).
    pub fn active_junctions(&self) -> Vec<Vec<bool>> {
        let mut active = vec![vec![false; self.cols]; self.rows];
        active[0][0] = true;
        for col in 0..self.cols {
            let rows: Vec<usize> = if col < self.cols / 2 {
                (0..self.rows).collect()
            } else {
                (0..self.rows).rev().collect()
            };
            for row in rows {
                if row == 0 && col == 0 {
                    continue;
                }
                let from_row = self.row_link(row, col) && active[row][col - 1];
                let from_col = match self.column_link(row, col) {
                    Some(ColumnLink::Down) => active[row - 1][col],
                    Some(ColumnLink::Up) => active[row + 1][col],
                    None => false,
                };
                active[row][col] = from_row || from_col;
            }
        }
        active
    }

    /// Junctions where a row stream and a column stream are fused.
    pub fn fusion_junctions(&self) -> Vec<(usize, usize)> {
        let active = self.active_junctions();
        let mut out = Vec::new();
        for row in 0..self.rows {
            for col in 1..self.cols {
                let from_row = self.row_link(row, col) && active[row][col - 1];
                let from_col = match self.column_link(row, col) {
                    Some(ColumnLink::Down) => active[row - 1][col],
                    Some(ColumnLink::Up) => active[row + 1][col],
                    None => false,
                };
                if from_row && from_col {
                    out.push((row, col));
                }
            }
        }
        out
    }

    /// Short human-readable description used in reports.
    pub fn summary(&self) -> String {
        format!(
            "r={} c={} ch={:?} rdb={}x{} att={} exch={} {:?}/{:?}/{:?}/{:?}",
            self.rows,
            self.cols,
            self.channels_per_scale,
            self.rdb_layers,
            self.growth_rate,
            self.attention,
            self.exchange_branches,
            self.routing,
            self.block,
            self.input,
            self.head
        )
    }
}

/// Architectural ablations of the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoAttention,
    /// Only the first and last columns connect scales.
    NoExchange,
    EncoderDecoder,
    /// Approximation of the original GridNet: plain residual blocks, no
    /// attention.
    OriginalGridNetStyle,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoAttention,
        Ablation::NoExchange,
        Ablation::EncoderDecoder,
        Ablation::OriginalGridNetStyle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoAttention => "no_attention",
            Ablation::NoExchange => "no_exchange",
            Ablation::EncoderDecoder => "encoder_decoder",
            Ablation::OriginalGridNetStyle => "original_gridnet_style",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

pub fn apply_ablation(config: &GridConfig, variant: Ablation) -> Result<GridConfig> {
    config.validate()?;
    let mut out = config.clone();
    match variant {
        Ablation::Full => {}
        Ablation::NoAttention => out.attention = false,
        Ablation::NoExchange => out.exchange_branches = false,
        Ablation::EncoderDecoder => out.routing = Routing::EncoderDecoder,
        Ablation::OriginalGridNetStyle => {
            out.attention = false;
            out.block = BlockKind::Residual;
        }
    }
    Ok(out)
}
