use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use sparsemac::compress::AllocMode;
use sparsemac::energy::{CostTable, EnergyScope};
use sparsemac::lower::SidePolicy;
use sparsemac::pe::Mode;
use sparsemac::tensor::{DType, Dims4};
use sparsemac::tile::TileConfig;
use sparsemac::trainops::OpKind;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpSelect {
    All,
    One(OpKind),
}

impl OpSelect {
    pub fn ops(self) -> Vec<OpKind> {
        match self {
            OpSelect::All => OpKind::ALL.to_vec(),
            OpSelect::One(op) => vec![op],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Input {
    Trace(PathBuf),
    Synthetic { sparsity: f64, dims: Dims4 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tile: TileConfig,
    pub op: OpSelect,
    pub side: SidePolicy,
    pub bypass_threshold: f64,
    pub costs_path: Option<PathBuf>,
    pub costs: CostTable,
    pub scope: EnergyScope,
    pub input: Input,
    /// Layer geometry used with synthetic inputs.
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    /// Fallback when a trace layer has no G_O to infer it from.
    pub padding: usize,
    pub alloc: AllocMode,
    /// Where `compress` writes the scheduled groups, if anywhere.
    pub emit: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tile: TileConfig::default(),
            op: OpSelect::All,
            side: SidePolicy::Auto,
            bypass_threshold: 0.05,
            costs_path: None,
            costs: CostTable::default(),
            scope: EnergyScope::Chip,
            input: Input::Synthetic {
                sparsity: 0.5,
                dims: Dims4::new(1, 128, 30, 30),
            },
            filters: 32,
            kernel: (3, 3),
            stride: 1,
            padding: 0,
            alloc: AllocMode::Packed,
            emit: None,
            out: None,
            seed: 1,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn dims(v: &str) -> Result<Dims4, CliError> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| num("dims", p.trim()))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n, c, h, w] => Ok(Dims4::new(n, c, h, w)),
        _ => Err(CliError::Config(format!("dims need n,c,h,w, got `{v}`"))),
    }
}

/// Parses `s=<f>,dims=<n,c,h,w>`.
pub fn parse_synthetic(v: &str) -> Result<Input, CliError> {
    let (mut sparsity, mut d) = (None, None);
    let mut rest = v.trim();
    while !rest.is_empty() {
        let (key, tail) = rest
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("bad synthetic spec `{v}`")))?;
        // dims swallows the comma-separated list up to the next key
        let end = tail.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(tail.len());
        let val = tail[..end].trim_end_matches(',');
        match key.trim() {
            "s" => sparsity = Some(num::<f64>("s", val)?),
            "dims" => d = Some(dims(val)?),
            other => return Err(CliError::Config(format!("unknown synthetic field `{other}`"))),
        }
        rest = &tail[end..];
    }
    let sparsity = sparsity.unwrap_or(0.5);
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(CliError::Config(format!("sparsity {sparsity} outside [0, 1]")));
    }
    Ok(Input::Synthetic {
        sparsity,
        dims: d.unwrap_or(Dims4::new(1, 128, 30, 30)),
    })
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), CliError> {
        match key {
            "rows" => self.tile.rows = num(key, v)?,
            "cols" => self.tile.cols = num(key, v)?,
            "tiles" => self.tile.tiles = num(key, v)?,
            "lanes" => self.tile.pe.lanes = num(key, v)?,
            "depth" => self.tile.pe.depth = num(key, v)?,
            "mode" => self.tile.pe.mode = v.parse::<Mode>()?,
            "dtype" => self.tile.pe.dtype = v.parse::<DType>()?,
            "op" => {
                self.op = match v.to_ascii_lowercase().as_str() {
                    "all" => OpSelect::All,
                    one => OpSelect::One(one.parse()?),
                }
            }
            "side" => self.side = v.to_ascii_lowercase().parse()?,
            "bypass_threshold" => self.bypass_threshold = num(key, v)?,
            "costs" => {
                let path = PathBuf::from(v);
                let text = fs::read_to_string(&path)?;
                let mut costs = CostTable::default();
                for (k, c) in parse_pairs(&text)? {
                    costs.set(&k, num(&k, &c)?)?;
                }
                self.costs = costs;
                self.costs_path = Some(path);
            }
            "energy_scope" => {
                self.scope = match v {
                    "compute" => EnergyScope::Compute,
                    "chip" => EnergyScope::Chip,
                    _ => return Err(CliError::Config(format!("energy_scope is compute or chip, got `{v}`"))),
                }
            }
            "trace" => self.input = Input::Trace(PathBuf::from(v)),
            "synthetic" => self.input = parse_synthetic(v)?,
            "filters" => self.filters = num(key, v)?,
            "kernel" => {
                self.kernel = match v.split_once(',') {
                    Some((x, y)) => (num(key, x.trim())?, num(key, y.trim())?),
                    None => {
                        let k = num(key, v)?;
                        (k, k)
                    }
                }
            }
            "stride" => self.stride = num(key, v)?,
            "padding" => self.padding = num(key, v)?,
            "alloc" => self.alloc = v.parse()?,
            "emit" => self.emit = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            "seed" => self.seed = num(key, v)?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.tile.validate()?;
        if self.tile.pe.lanes > 64 || self.tile.pe.depth > 8 {
            return Err(CliError::Config("lanes <= 64 and depth <= 8".into()));
        }
        if !(0.0..=1.0).contains(&self.bypass_threshold) {
            return Err(CliError::Config("bypass_threshold outside [0, 1]".into()));
        }
        if self.filters == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(CliError::Config("filters, kernel and stride must be >= 1".into()));
        }
        if let Input::Synthetic { dims, .. } = &self.input {
            if dims.is_empty() {
                return Err(CliError::Config("synthetic dims must be non-zero".into()));
            }
        }
        self.costs.validate()?;
        Ok(())
    }

    /// The resolved configuration as `# key = value` lines.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let t = &self.tile;
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "# {k} = {v}");
        };
        line("rows", t.rows.to_string());
        line("cols", t.cols.to_string());
        line("tiles", t.tiles.to_string());
        line("lanes", t.pe.lanes.to_string());
        line("depth", t.pe.depth.to_string());
        line("mode", t.pe.mode.to_string());
        line("dtype", t.pe.dtype.to_string());
        line(
            "op",
            match self.op {
                OpSelect::All => "all".into(),
                OpSelect::One(op) => op.to_string(),
            },
        );
        line("side", self.side.to_string());
        line("bypass_threshold", self.bypass_threshold.to_string());
        line(
            "costs",
            self.costs_path
                .as_ref()
                .map_or("default".into(), |p| p.display().to_string()),
        );
        line(
            "energy_scope",
            match self.scope {
                EnergyScope::Compute => "compute".into(),
                EnergyScope::Chip => "chip".into(),
            },
        );
        match &self.input {
            Input::Trace(p) => line("trace", p.display().to_string()),
            Input::Synthetic { sparsity, dims } => line(
                "synthetic",
                format!("s={sparsity},dims={},{},{},{}", dims.n, dims.c, dims.h, dims.w),
            ),
        }
        line("filters", self.filters.to_string());
        line("kernel", format!("{},{}", self.kernel.0, self.kernel.1));
        line("stride", self.stride.to_string());
        line("padding", self.padding.to_string());
        line("alloc", self.alloc.to_string());
        line("seed", self.seed.to_string());
        s
    }
}
