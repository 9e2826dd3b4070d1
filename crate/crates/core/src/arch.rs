//! Declarative builders for the network families: the reference TempCNN,
//! guidance variants, the fully connected baseline, pooling variants and the
//! width/depth sweep grids, plus a textual name grammar that selects them.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{ConvKind, LayerSpec, NetworkSpec, PoolKind};

/// Spacing of the regular grid the reach is expressed on.
pub const GRID_STEP_DAYS: u32 = 2;

/// Reference TempCNN hyper-parameters and the regularization layers it carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TempCnnConfig {
    pub width: usize,
    pub depth: usize,
    pub filter: usize,
    pub dense: usize,
    /// Dropout rate after every block; 0 removes the dropout layers.
    pub dropout: f64,
    pub batchnorm: bool,
}

impl Default for TempCnnConfig {
    fn default() -> Self {
        Self {
            width: 64,
            depth: 3,
            filter: 5,
            dense: 256,
            dropout: 0.5,
            batchnorm: true,
        }
    }
}

fn push_block(layers: &mut Vec<LayerSpec>, core: LayerSpec, cfg: &TempCnnConfig) {
    layers.push(core);
    if cfg.batchnorm {
        layers.push(LayerSpec::BatchNorm);
    }
    layers.push(LayerSpec::Relu);
    if cfg.dropout > 0.0 {
        layers.push(LayerSpec::Dropout { rate: cfg.dropout });
    }
}

fn head(layers: &mut Vec<LayerSpec>, classes: usize, cfg: &TempCnnConfig) {
    push_block(layers, LayerSpec::Dense { units: cfg.dense }, cfg);
    layers.push(LayerSpec::Softmax { classes });
}

/// Blocks are `conv -> batchnorm -> relu -> dropout`; then flatten, one dense
/// block and the softmax. `depth = 0` gives a dense-only network.
pub fn build_tempcnn(t: usize, d: usize, c: usize, cfg: &TempCnnConfig) -> NetworkSpec {
    let mut layers = Vec::new();
    for _ in 0..cfg.depth {
        push_block(&mut layers, LayerSpec::conv(cfg.filter, cfg.width), cfg);
    }
    layers.push(LayerSpec::Flatten);
    head(&mut layers, c, cfg);
    NetworkSpec::new(t, d, layers)
}

pub const FC_UNITS: usize = 1024;
pub const FC_LAYERS: usize = 3;

/// Flatten, then `layers` dense blocks of `units`, then the softmax.
pub fn build_fc(t: usize, d: usize, c: usize, units: usize, layers: usize, cfg: &TempCnnConfig) -> NetworkSpec {
    let mut out = vec![LayerSpec::Flatten];
    for _ in 0..layers {
        push_block(&mut out, LayerSpec::Dense { units }, cfg);
    }
    out.push(LayerSpec::Softmax { classes: c });
    NetworkSpec::new(t, d, out)
}

/// Three dense blocks of 1024 units.
pub fn build_fc_baseline(t: usize, d: usize, c: usize) -> NetworkSpec {
    build_fc(t, d, c, FC_UNITS, FC_LAYERS, &TempCnnConfig::default())
}

/// Which data dimensions the weight sharing exploits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GuidanceKind {
    None,
    Temporal,
    Spectral,
    SpectroTemporal,
}

impl GuidanceKind {
    pub const ALL: [GuidanceKind; 4] = [
        GuidanceKind::None,
        GuidanceKind::Temporal,
        GuidanceKind::Spectral,
        GuidanceKind::SpectroTemporal,
    ];
}

impl fmt::Display for GuidanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceKind::None => "none",
            GuidanceKind::Temporal => "temporal",
            GuidanceKind::Spectral => "spectral",
            GuidanceKind::SpectroTemporal => "spectro-temporal",
        })
    }
}

impl FromStr for GuidanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "fc" => Ok(GuidanceKind::None),
            "temporal" => Ok(GuidanceKind::Temporal),
            "spectral" => Ok(GuidanceKind::Spectral),
            "spectro-temporal" | "st" => Ok(GuidanceKind::SpectroTemporal),
            other => Err(Error::InvalidInput(format!("unknown guidance {other:?}"))),
        }
    }
}

/// Temporal: convolutions with one filter per unit shared across channels.
/// Spectral: a pointwise convolution over all channels, then pointwise
/// convolutions, so no temporal neighborhood is mixed before the dense block.
pub fn build_guidance(
    kind: GuidanceKind,
    t: usize,
    d: usize,
    c: usize,
    cfg: &TempCnnConfig,
    fc_units: usize,
) -> NetworkSpec {
    match kind {
        GuidanceKind::None => build_fc(t, d, c, fc_units, FC_LAYERS, cfg),
        GuidanceKind::SpectroTemporal => build_tempcnn(t, d, c, cfg),
        GuidanceKind::Temporal | GuidanceKind::Spectral => {
            let mut layers = Vec::new();
            for _ in 0..cfg.depth {
                let conv = if kind == GuidanceKind::Temporal {
                    LayerSpec::Conv {
                        filter: cfg.filter,
                        units: cfg.width,
                        kind: ConvKind::Temporal,
                    }
                } else {
                    LayerSpec::conv(1, cfg.width)
                };
                push_block(&mut layers, conv, cfg);
            }
            layers.push(LayerSpec::Flatten);
            head(&mut layers, c, cfg);
            NetworkSpec::new(t, d, layers)
        }
    }
}

/// Smallest odd filter whose half-width covers `reach_days` on a grid of
/// `step_days`, never below 3.
pub fn filter_for_reach(reach_days: u32, step_days: u32) -> usize {
    let f = (2 * reach_days).div_ceil(step_days.max(1)) as usize + 1;
    let f = if f.is_multiple_of(2) { f + 1 } else { f };
    f.max(3)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PoolingVariant {
    Mp,
    Ap,
    MpGap,
    ApGap,
    Gap,
}

impl PoolingVariant {
    pub const ALL: [PoolingVariant; 5] = [
        PoolingVariant::Mp,
        PoolingVariant::Ap,
        PoolingVariant::MpGap,
        PoolingVariant::ApGap,
        PoolingVariant::Gap,
    ];

    fn local(self) -> Option<PoolKind> {
        match self {
            PoolingVariant::Mp | PoolingVariant::MpGap => Some(PoolKind::Max),
            PoolingVariant::Ap | PoolingVariant::ApGap => Some(PoolKind::Avg),
            PoolingVariant::Gap => None,
        }
    }

    fn global(self) -> bool {
        matches!(
            self,
            PoolingVariant::MpGap | PoolingVariant::ApGap | PoolingVariant::Gap
        )
    }
}

impl fmt::Display for PoolingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingVariant::Mp => "mp",
            PoolingVariant::Ap => "ap",
            PoolingVariant::MpGap => "mp+gap",
            PoolingVariant::ApGap => "ap+gap",
            PoolingVariant::Gap => "gap",
        })
    }
}

impl FromStr for PoolingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PoolingVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown pooling variant {s:?}")))
    }
}

pub const LOCAL_POOL_WINDOW: usize = 2;

/// Filter sizes holding the reach constant when a local pool of window 2
/// follows every convolution but the last: `f_i = 2 r / (s 2^i) + 1`, odd, at least 3.
pub fn pooled_filter_schedule(reach_days: u32, depth: usize) -> Vec<usize> {
    (0..depth)
        .map(|i| filter_for_reach(reach_days, GRID_STEP_DAYS << i))
        .collect()
}

/// TempCNN with pooling. Local variants interleave a window-2 pool between
/// convolutions with the filter schedule above; global variants replace the
/// flatten by a global average pool. Without local pooling the filter is
/// [`filter_for_reach`] at every layer.
pub fn build_pooling_variant(
    variant: PoolingVariant,
    reach_days: u32,
    t: usize,
    d: usize,
    c: usize,
    cfg: &TempCnnConfig,
) -> NetworkSpec {
    let filters = match variant.local() {
        Some(_) => pooled_filter_schedule(reach_days, cfg.depth),
        None => vec![filter_for_reach(reach_days, GRID_STEP_DAYS); cfg.depth],
    };
    let mut layers = Vec::new();
    for (i, &f) in filters.iter().enumerate() {
        push_block(&mut layers, LayerSpec::conv(f, cfg.width), cfg);
        if let (Some(kind), true) = (variant.local(), i + 1 < cfg.depth) {
            layers.push(LayerSpec::Pool {
                kind,
                window: LOCAL_POOL_WINDOW,
            });
        }
    }
    layers.push(if variant.global() {
        LayerSpec::GlobalAvgPool
    } else {
        LayerSpec::Flatten
    });
    head(&mut layers, c, cfg);
    NetworkSpec::new(t, d, layers)
}

/// Named architectures sharing one training protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub members: Vec<(String, NetworkSpec)>,
}

impl SweepGrid {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

pub const SWEEP_WIDTHS: [usize; 7] = [16, 32, 64, 128, 256, 512, 1024];

pub fn make_width_sweep_with(t: usize, d: usize, c: usize, base: &TempCnnConfig, widths: &[usize]) -> SweepGrid {
    SweepGrid {
        members: widths
            .iter()
            .map(|&w| {
                let cfg = TempCnnConfig { width: w, ..*base };
                (format!("width={w}"), build_tempcnn(t, d, c, &cfg))
            })
            .collect(),
    }
}

/// Depth 3, widths 16 to 1024.
pub fn make_width_sweep(t: usize, d: usize, c: usize) -> SweepGrid {
    make_width_sweep_with(t, d, c, &TempCnnConfig::default(), &SWEEP_WIDTHS)
}

/// Convolution units of the depth-sweep member with `i + 1` layers.
pub const DEPTH_SWEEP_WIDTHS: [usize; 6] = [256, 128, 64, 32, 24, 16];
pub const DEPTH_SWEEP_TARGET: usize = 2_500_000;

/// Dense units bringing `build_tempcnn` closest to `target` parameters, at least 1.
pub fn dense_units_for_target(t: usize, d: usize, c: usize, cfg: &TempCnnConfig, target: usize) -> Result<usize> {
    let count = |dense| build_tempcnn(t, d, c, &TempCnnConfig { dense, ..*cfg }).param_count();
    let a = count(1)? as f64;
    let slope = count(2)? as f64 - a;
    let n = ((target as f64 - a) / slope + 1.0).round();
    Ok(n.max(1.0) as usize)
}

/// One to `widths.len()` convolution layers; the dense width of each member is
/// solved so that every member has about `target` parameters.
pub fn make_depth_sweep_with(
    t: usize,
    d: usize,
    c: usize,
    base: &TempCnnConfig,
    widths: &[usize],
    target: usize,
) -> Result<SweepGrid> {
    let mut members = Vec::with_capacity(widths.len());
    for (i, &w) in widths.iter().enumerate() {
        let mut cfg = TempCnnConfig {
            width: w,
            depth: i + 1,
            ..*base
        };
        cfg.dense = dense_units_for_target(t, d, c, &cfg, target)?;
        members.push((
            format!("depth={}:width={}:dense={}", i + 1, w, cfg.dense),
            build_tempcnn(t, d, c, &cfg),
        ));
    }
    Ok(SweepGrid { members })
}

pub fn make_depth_sweep(t: usize, d: usize, c: usize) -> Result<SweepGrid> {
    make_depth_sweep_with(
        t,
        d,
        c,
        &TempCnnConfig::default(),
        &DEPTH_SWEEP_WIDTHS,
        DEPTH_SWEEP_TARGET,
    )
}

/// A classifier selected by name.
///
/// Grammar: a family followed by `:`-separated options.
///
/// * `tempcnn[:width=N][:depth=N][:filter=N][:dense=N][:dropout=R][:bn=0|1]`
/// * `fc[:units=N][:layers=N]` plus the dropout and bn options
/// * `guidance:{none,temporal,spectral,spectro-temporal}` plus tempcnn options
/// * `pool:{mp,ap,mp+gap,ap+gap,gap}:reach=DAYS` plus tempcnn options
/// * `rf[:trees=N]`
#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    TempCnn(TempCnnConfig),
    Fc {
        units: usize,
        layers: usize,
        cfg: TempCnnConfig,
    },
    Guidance {
        kind: GuidanceKind,
        cfg: TempCnnConfig,
        fc_units: usize,
    },
    Pooling {
        variant: PoolingVariant,
        reach_days: u32,
        cfg: TempCnnConfig,
    },
    Forest {
        trees: usize,
    },
}

pub const DEFAULT_TREES: usize = 500;

fn opt<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidInput(format!("bad value {value:?} for option {key}")))
}

fn apply_cfg_option(cfg: &mut TempCnnConfig, key: &str, value: &str) -> Result<bool> {
    match key {
        "width" => cfg.width = opt(key, value)?,
        "depth" => cfg.depth = opt(key, value)?,
        "filter" => cfg.filter = opt(key, value)?,
        "dense" => cfg.dense = opt(key, value)?,
        "dropout" => cfg.dropout = opt(key, value)?,
        "bn" => cfg.batchnorm = opt::<u8>(key, value)? != 0,
        _ => return Ok(false),
    }
    Ok(true)
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let family = parts.next().unwrap_or_default();
        let mut cfg = TempCnnConfig::default();
        let mut arch = match family {
            "tempcnn" => Architecture::TempCnn(cfg),
            "fc" => Architecture::Fc {
                units: FC_UNITS,
                layers: FC_LAYERS,
                cfg,
            },
            "guidance" => {
                let kind = parts
                    .next()
                    .ok_or_else(|| Error::InvalidInput("guidance needs a kind".into()))?
                    .parse()?;
                Architecture::Guidance {
                    kind,
                    cfg,
                    fc_units: FC_UNITS,
                }
            }
            "pool" => {
                let variant = parts
                    .next()
                    .ok_or_else(|| Error::InvalidInput("pool needs a variant".into()))?
                    .parse()?;
                Architecture::Pooling {
                    variant,
                    reach_days: 4,
                    cfg,
                }
            }
            "rf" => Architecture::Forest { trees: DEFAULT_TREES },
            other => {
                return Err(Error::InvalidInput(format!(
                    "unknown architecture {other:?} (expected tempcnn, fc, guidance, pool or rf)"
                )))
            }
        };
        for part in parts {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidInput(format!("option {part:?} is not key=value")))?;
            let handled = match &mut arch {
                Architecture::TempCnn(c) => apply_cfg_option(c, key, value)?,
                Architecture::Fc { units, layers, cfg } => match key {
                    "units" => {
                        *units = opt(key, value)?;
                        true
                    }
                    "layers" => {
                        *layers = opt(key, value)?;
                        true
                    }
                    _ => apply_cfg_option(cfg, key, value)?,
                },
                Architecture::Guidance { cfg, fc_units, .. } => {
                    if key == "units" {
                        *fc_units = opt(key, value)?;
                        true
                    } else {
                        apply_cfg_option(cfg, key, value)?
                    }
                }
                Architecture::Pooling { reach_days, cfg, .. } => {
                    if key == "reach" {
                        *reach_days = opt(key, value)?;
                        true
                    } else {
                        apply_cfg_option(cfg, key, value)?
                    }
                }
                Architecture::Forest { trees } => {
                    if key == "trees" {
                        *trees = opt(key, value)?;
                        true
                    } else {
                        false
                    }
                }
            };
            if !handled {
                return Err(Error::InvalidInput(format!(
                    "option {key:?} does not apply to {family}"
                )));
            }
        }
        cfg = match &arch {
            Architecture::TempCnn(c)
            | Architecture::Fc { cfg: c, .. }
            | Architecture::Guidance { cfg: c, .. }
            | Architecture::Pooling { cfg: c, .. } => *c,
            Architecture::Forest { trees } => {
                if *trees == 0 {
                    return Err(Error::InvalidInput("a forest needs at least one tree".into()));
                }
                return Ok(arch);
            }
        };
        if !(0.0..1.0).contains(&cfg.dropout) {
            return Err(Error::InvalidInput(format!("dropout {} not in [0, 1)", cfg.dropout)));
        }
        Ok(arch)
    }
}

impl Architecture {
    pub fn is_forest(&self) -> bool {
        matches!(self, Architecture::Forest { .. })
    }

    /// Network spec for inputs of `t` steps and `d` channels over `c` classes.
    pub fn network_spec(&self, t: usize, d: usize, c: usize) -> Result<NetworkSpec> {
        let spec = match self {
            Architecture::TempCnn(cfg) => build_tempcnn(t, d, c, cfg),
            Architecture::Fc { units, layers, cfg } => build_fc(t, d, c, *units, *layers, cfg),
            Architecture::Guidance { kind, cfg, fc_units } => build_guidance(*kind, t, d, c, cfg, *fc_units),
            Architecture::Pooling {
                variant,
                reach_days,
                cfg,
            } => build_pooling_variant(*variant, *reach_days, t, d, c, cfg),
            Architecture::Forest { .. } => {
                return Err(Error::InvalidInput("a random forest has no network spec".into()))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reach_schedule() {
        assert_eq!(pooled_filter_schedule(8, 3), vec![9, 5, 3]);
        assert_eq!(pooled_filter_schedule(2, 3), vec![3, 3, 3]);
        assert_eq!(pooled_filter_schedule(4, 3), vec![5, 3, 3]);
        assert_eq!(pooled_filter_schedule(32, 3), vec![33, 17, 9]);
        let plain: Vec<usize> = [2, 4, 8, 16, 32].iter().map(|&r| filter_for_reach(r, 2)).collect();
        assert_eq!(plain, vec![3, 5, 9, 17, 33]);
    }

    #[test]
    fn names_parse() {
        let a: Architecture = "pool:ap+gap:reach=8".parse().unwrap();
        assert_eq!(
            a,
            Architecture::Pooling {
                variant: PoolingVariant::ApGap,
                reach_days: 8,
                cfg: TempCnnConfig::default()
            }
        );
        let t: Architecture = "tempcnn:width=16:dense=32:bn=0".parse().unwrap();
        let Architecture::TempCnn(cfg) = t else { panic!() };
        assert_eq!((cfg.width, cfg.dense, cfg.batchnorm), (16, 32, false));
        assert!("guidance:spectral".parse::<Architecture>().is_ok());
        assert!("rf:trees=10".parse::<Architecture>().unwrap().is_forest());
        for bad in [
            "",
            "lstm",
            "tempcnn:width",
            "tempcnn:reach=3",
            "pool:xp",
            "fc:dropout=1.5",
        ] {
            assert!(bad.parse::<Architecture>().is_err(), "{bad}");
        }
    }

    #[test]
    fn spectro_temporal_is_tempcnn() {
        let cfg = TempCnnConfig::default();
        assert_eq!(
            build_guidance(GuidanceKind::SpectroTemporal, 149, 3, 13, &cfg, FC_UNITS),
            build_tempcnn(149, 3, 13, &cfg)
        );
        assert_eq!(
            build_guidance(GuidanceKind::None, 46, 3, 13, &cfg, FC_UNITS),
            build_fc_baseline(46, 3, 13)
        );
    }
}
