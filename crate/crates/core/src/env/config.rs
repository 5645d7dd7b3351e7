//! Environment configuration, layout files and named presets.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pos {
    pub row: usize,
    pub col: usize,
}

impl Pos {
    pub const fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.row, self.col)
    }
}

/// Static grid map: where shelves may rest and where deliveries go.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub height: usize,
    pub width: usize,
    pub shelf_slots: Vec<Pos>,
    pub goals: Vec<Pos>,
}

impl Layout {
    /// Parses the text format: a `height width` header line followed by
    /// `height` rows of `.` (empty), `S` (shelf slot) or `G` (goal).
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let (hline, header) = lines.next().ok_or(Error::Layout {
            line: 1,
            msg: "missing `height width` header".into(),
        })?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Layout {
                line: hline + 1,
                msg: format!("bad header: {e}"),
            })?;
        let [height, width] = dims[..] else {
            return Err(Error::Layout {
                line: hline + 1,
                msg: "header must be `height width`".into(),
            });
        };
        let mut shelf_slots = Vec::new();
        let mut goals = Vec::new();
        let mut rows = 0;
        for (lineno, line) in lines {
            let line = line.trim();
            if rows == height {
                return Err(Error::Layout {
                    line: lineno + 1,
                    msg: format!("more than {height} grid rows"),
                });
            }
            if line.chars().count() != width {
                return Err(Error::Layout {
                    line: lineno + 1,
                    msg: format!("expected {width} cells, found {}", line.chars().count()),
                });
            }
            for (col, ch) in line.chars().enumerate() {
                match ch {
                    '.' => {}
                    'S' => shelf_slots.push(Pos::new(rows, col)),
                    'G' => goals.push(Pos::new(rows, col)),
                    other => {
                        return Err(Error::Layout {
                            line: lineno + 1,
                            msg: format!("unknown cell glyph {other:?}"),
                        })
                    }
                }
            }
            rows += 1;
        }
        if rows != height {
            return Err(Error::Layout {
                line: hline + 1,
                msg: format!("header says {height} rows, found {rows}"),
            });
        }
        Ok(Self {
            height,
            width,
            shelf_slots,
            goals,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                let p = Pos::new(r, c);
                out.push(if self.goals.contains(&p) {
                    'G'
                } else if self.shelf_slots.contains(&p) {
                    'S'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    /// Aisle layout in the style of the public robotic-warehouse benchmark:
    /// two-wide shelf columns separated by one-wide aisles, split into bands
    /// by horizontal aisles, goals centred on the bottom row.
    fn aisles(height: usize, width: usize, bands: &[(usize, usize)], n_goals: usize) -> Self {
        let mut shelf_slots = Vec::new();
        for &(r0, r1) in bands {
            for r in r0..=r1 {
                let mut c = 1;
                while c + 1 < width - 1 {
                    shelf_slots.push(Pos::new(r, c));
                    shelf_slots.push(Pos::new(r, c + 1));
                    c += 3;
                }
            }
        }
        let start = (width - n_goals) / 2;
        let goals = (start..start + n_goals).map(|c| Pos::new(height - 1, c)).collect();
        shelf_slots.sort();
        Self {
            height,
            width,
            shelf_slots,
            goals,
        }
    }
}

pub const PRESETS: [&str; 4] = ["micro-2ag", "tiny-2ag", "small-4ag", "medium-6ag"];

/// Full environment configuration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvConfig {
    pub name: String,
    pub grid_height: usize,
    pub grid_width: usize,
    pub shelf_slots: Vec<Pos>,
    pub goal_cells: Vec<Pos>,
    pub n_agents: usize,
    pub n_shelves: usize,
    pub n_requested: usize,
    pub episode_limit: usize,
    pub obs_radius: usize,
    pub seed: u64,
}

impl EnvConfig {
    pub fn from_layout(name: &str, layout: Layout, n_agents: usize) -> Self {
        let n_shelves = layout.shelf_slots.len();
        Self {
            name: name.to_string(),
            grid_height: layout.height,
            grid_width: layout.width,
            n_shelves,
            n_requested: n_agents.min(n_shelves.saturating_sub(1)),
            shelf_slots: layout.shelf_slots,
            goal_cells: layout.goals,
            n_agents,
            episode_limit: 500,
            obs_radius: 1,
            seed: 0,
        }
    }

    /// Named presets. The three larger ones approximate the public benchmark
    /// layouts of the same names; `micro-2ag` is a desk-scale map.
    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "micro-2ag" => {
                let layout = Layout::parse(MICRO_LAYOUT).expect("builtin layout");
                let mut c = Self::from_layout(name, layout, 2);
                c.n_shelves = 2;
                c.n_requested = 1;
                c.episode_limit = 50;
                c
            }
            "tiny-2ag" => Self::from_layout(name, Layout::aisles(10, 11, &[(1, 3), (5, 7)], 2), 2),
            "small-4ag" => Self::from_layout(
                name,
                Layout::aisles(10, 20, &[(1, 3), (5, 7)], 2),
                4,
            ),
            "medium-6ag" => Self::from_layout(
                name,
                Layout::aisles(16, 20, &[(1, 3), (5, 7), (9, 11)], 2),
                6,
            ),
            other => {
                return Err(Error::EnvConfig(format!(
                    "unknown preset {other:?} (expected one of {PRESETS:?})"
                )))
            }
        };
        Ok(cfg)
    }

    pub fn layout(&self) -> Layout {
        Layout {
            height: self.grid_height,
            width: self.grid_width,
            shelf_slots: self.shelf_slots.clone(),
            goals: self.goal_cells.clone(),
        }
    }

    pub fn n_cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn in_grid(&self, p: Pos) -> bool {
        p.row < self.grid_height && p.col < self.grid_width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::EnvConfig(m));
        if self.grid_height == 0 || self.grid_width == 0 {
            return bad("grid must be at least 1x1".into());
        }
        if self.n_agents == 0 {
            return bad("need at least one agent".into());
        }
        if self.episode_limit == 0 {
            return bad("episode_limit must be positive".into());
        }
        if self.n_requested > 0 && self.n_requested >= self.n_shelves {
            return bad(format!(
                "n_requested {} must be below n_shelves {} so a replacement request always exists",
                self.n_requested, self.n_shelves
            ));
        }
        if let Some(p) = self
            .goal_cells
            .iter()
            .chain(&self.shelf_slots)
            .find(|p| !self.in_grid(**p))
        {
            return bad(format!("cell {p} outside the grid"));
        }
        if let Some(p) = self.goal_cells.iter().find(|p| self.shelf_slots.contains(p)) {
            return bad(format!("cell {p} is both goal and shelf slot"));
        }
        Ok(())
    }

    /// Placement feasibility, checked at reset.
    pub fn check_placement(&self) -> Result<()> {
        if self.n_shelves > self.shelf_slots.len() {
            return Err(Error::Placement(format!(
                "{} shelves but only {} shelf slots",
                self.n_shelves,
                self.shelf_slots.len()
            )));
        }
        if self.n_agents + self.n_shelves > self.n_cells() {
            return Err(Error::Placement(format!(
                "{} agents and {} shelves do not fit in {} cells",
                self.n_agents,
                self.n_shelves,
                self.n_cells()
            )));
        }
        Ok(())
    }

    pub fn joint_action_count(&self) -> u128 {
        joint_action_count(self.n_agents)
    }
}

/// `5^n_agents`, saturating at `u128::MAX`.
pub fn joint_action_count(n_agents: usize) -> u128 {
    u32::try_from(n_agents)
        .ok()
        .and_then(|n| 5u128.checked_pow(n))
        .unwrap_or(u128::MAX)
}

const MICRO_LAYOUT: &str = "\
5 5
.....
.....
.....
.S.S.
GGGGG
";
