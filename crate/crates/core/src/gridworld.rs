//! Gridworld MDPs built from ASCII maps.
//!
//! A map is a rectangle of `#` (wall) and `.` (free) cells. Free cells become
//! states, numbered in row-major order. The agent follows the uniform random
//! policy over the four moves; bumping into a wall leaves it in place. From
//! that policy we derive the transition matrix `P` and the symmetrized
//! Laplacian `L = I - (P + Pᵀ) / 2`.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Moves available in every cell: up, down, left, right.
const MOVES: [(i64, i64); 4] = [(0, -1), (0, 1), (-1, 0), (1, 0)];

#[derive(Debug, Error)]
pub enum GridError {
    #[error("map is empty")]
    Empty,
    #[error("row {row} has width {found}, expected {expected}")]
    NonRectangular { row: usize, expected: usize, found: usize },
    #[error("unexpected character {ch:?} at row {row}, column {col}")]
    InvalidChar { ch: char, row: usize, col: usize },
    #[error("border cell at row {row}, column {col} is not a wall")]
    OpenBorder { row: usize, col: usize },
    #[error("map has no free cells")]
    NoFreeCells,
    #[error("free cells form {components} disconnected regions")]
    Disconnected { components: usize },
    #[error("state {state} out of range (|S| = {num_states})")]
    InvalidState { state: usize, num_states: usize },
    #[error("unknown bundled map {0:?}")]
    UnknownMap(String),
    #[error("malformed dataset: {0}")]
    Dataset(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GridError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        GridError::Io { path: path.to_path_buf(), source }
    }
}

/// Parsed occupancy map plus the free-cell ↔ state-id bijection.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWorld {
    width: usize,
    height: usize,
    /// Row-major, `true` for walls.
    walls: Vec<bool>,
    /// Row-major cell → state id, `None` on walls.
    state_index: Vec<Option<usize>>,
    /// State id → `(x, y)` cell coordinates.
    coords: Vec<(usize, usize)>,
}

impl GridWorld {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_states(&self) -> usize {
        self.coords.len()
    }

    pub fn is_wall(&self, x: usize, y: usize) -> bool {
        self.walls[y * self.width + x]
    }

    /// State id of the free cell at `(x, y)`, if any.
    pub fn state_at(&self, x: usize, y: usize) -> Option<usize> {
        if x >= self.width || y >= self.height {
            return None;
        }
        self.state_index[y * self.width + x]
    }

    pub fn coords(&self, state: usize) -> Result<(usize, usize), GridError> {
        self.coords.get(state).copied().ok_or(GridError::InvalidState {
            state,
            num_states: self.num_states(),
        })
    }

    pub fn all_coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    /// Destination of `action` from `state`, staying put when blocked.
    fn step(&self, state: usize, action: usize) -> usize {
        let (x, y) = self.coords[state];
        let (dx, dy) = MOVES[action];
        let nx = x as i64 + dx;
        let ny = y as i64 + dy;
        if nx < 0 || ny < 0 {
            return state;
        }
        self.state_at(nx as usize, ny as usize).unwrap_or(state)
    }

    /// Render back to map text, one line per row, newline terminated.
    pub fn to_map_string(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(if self.is_wall(x, y) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for GridWorld {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_map_string())
    }
}

/// Parse an ASCII map. Trailing whitespace on lines and blank trailing lines
/// are ignored.
pub fn parse_grid_map(text: &str) -> Result<GridWorld, GridError> {
    let mut rows: Vec<&str> = text.lines().map(str::trim_end).collect();
    while rows.last().is_some_and(|l| l.is_empty()) {
        rows.pop();
    }
    if rows.is_empty() {
        return Err(GridError::Empty);
    }
    let width = rows[0].chars().count();
    let height = rows.len();
    let mut walls = Vec::with_capacity(width * height);
    for (row, line) in rows.iter().enumerate() {
        let found = line.chars().count();
        if found != width {
            return Err(GridError::NonRectangular { row, expected: width, found });
        }
        for (col, ch) in line.chars().enumerate() {
            match ch {
                '#' => walls.push(true),
                '.' => walls.push(false),
                _ => return Err(GridError::InvalidChar { ch, row, col }),
            }
        }
    }
    for y in 0..height {
        for x in 0..width {
            let border = x == 0 || y == 0 || x + 1 == width || y + 1 == height;
            if border && !walls[y * width + x] {
                return Err(GridError::OpenBorder { row: y, col: x });
            }
        }
    }

    let mut state_index = vec![None; width * height];
    let mut coords = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !walls[y * width + x] {
                state_index[y * width + x] = Some(coords.len());
                coords.push((x, y));
            }
        }
    }
    if coords.is_empty() {
        return Err(GridError::NoFreeCells);
    }
    let world = GridWorld { width, height, walls, state_index, coords };
    let components = count_components(&world);
    if components != 1 {
        return Err(GridError::Disconnected { components });
    }
    Ok(world)
}

fn count_components(world: &GridWorld) -> usize {
    let n = world.num_states();
    let mut seen = vec![false; n];
    let mut components = 0;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(s) = queue.pop_front() {
            for a in 0..MOVES.len() {
                let t = world.step(s, a);
                if !seen[t] {
                    seen[t] = true;
                    queue.push_back(t);
                }
            }
        }
    }
    components
}

pub fn load_grid_map(path: impl AsRef<Path>) -> Result<GridWorld, GridError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GridError::io(path, e))?;
    parse_grid_map(&text)
}

/// Maps shipped with the crate. Layouts are inspired by common gridworld
/// benchmarks (open rooms, four rooms, small mazes), not copies of any
/// particular published layout.
pub const BUNDLED_MAPS: &[(&str, &str)] = &[
    ("corridor-2", include_str!("../maps/corridor-2.txt")),
    ("corridor-5", include_str!("../maps/corridor-5.txt")),
    ("ring-8", include_str!("../maps/ring-8.txt")),
    ("open-room-5", include_str!("../maps/open-room-5.txt")),
    ("four-rooms-11", include_str!("../maps/four-rooms-11.txt")),
    ("maze-6", include_str!("../maps/maze-6.txt")),
    ("maze-7", include_str!("../maps/maze-7.txt")),
    ("maze-9", include_str!("../maps/maze-9.txt")),
    ("spiral-9", include_str!("../maps/spiral-9.txt")),
];

pub fn bundled_map(name: &str) -> Result<GridWorld, GridError> {
    BUNDLED_MAPS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| GridError::UnknownMap(name.to_string()))
        .and_then(|(_, text)| parse_grid_map(text))
}

/// Resolve either a bundled map name or a path to a map file.
pub fn resolve_map(name_or_path: &str) -> Result<GridWorld, GridError> {
    match bundled_map(name_or_path) {
        Ok(world) => Ok(world),
        Err(GridError::UnknownMap(_)) => load_grid_map(name_or_path),
        Err(e) => Err(e),
    }
}

/// Transition matrix of the uniform random policy and its symmetrized Laplacian.
#[derive(Debug, Clone)]
pub struct TransitionModel {
    transition: Array2<f64>,
    laplacian: Array2<f64>,
    /// Per row: cumulative probabilities over the nonzero successors.
    row_cdf: Vec<Vec<(usize, f64)>>,
}

impl TransitionModel {
    /// Build from an arbitrary row-stochastic matrix.
    pub fn from_transition_matrix(transition: Array2<f64>) -> Self {
        let n = transition.nrows();
        let mut laplacian = Array2::<f64>::eye(n);
        for i in 0..n {
            for j in 0..n {
                laplacian[[i, j]] -= 0.5 * (transition[[i, j]] + transition[[j, i]]);
            }
        }
        let row_cdf = (0..n)
            .map(|i| {
                let mut acc = 0.0;
                transition
                    .row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(j, &p)| {
                        acc += p;
                        (j, acc)
                    })
                    .collect()
            })
            .collect();
        TransitionModel { transition, laplacian, row_cdf }
    }

    pub fn num_states(&self) -> usize {
        self.transition.nrows()
    }

    /// Row-stochastic `P_π`.
    pub fn transition(&self) -> &Array2<f64> {
        &self.transition
    }

    /// `L = I - (P + Pᵀ) / 2`.
    pub fn laplacian(&self) -> &Array2<f64> {
        &self.laplacian
    }

    fn sample_next<R: Rng>(&self, s: usize, rng: &mut R) -> usize {
        let cdf = &self.row_cdf[s];
        let total = cdf.last().map(|&(_, c)| c).unwrap_or(1.0);
        let u: f64 = rng.random::<f64>() * total;
        cdf.iter()
            .find(|&&(_, c)| u < c)
            .or_else(|| cdf.last())
            .map(|&(j, _)| j)
            .unwrap_or(s)
    }
}

pub fn build_transition_model(world: &GridWorld) -> TransitionModel {
    let n = world.num_states();
    let mut p = Array2::<f64>::zeros((n, n));
    for s in 0..n {
        for a in 0..MOVES.len() {
            p[[s, world.step(s, a)]] += 0.25;
        }
    }
    TransitionModel::from_transition_matrix(p)
}

/// i.i.d. transitions `s ~ uniform(S)`, `s' ~ P[s, ·]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub pairs: Vec<(usize, usize)>,
    pub seed: u64,
    pub source: String,
}

impl TransitionDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Write `s,sp` rows to `path` and the metadata record to `path.meta`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| GridError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let write_all = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
            writeln!(w, "s,sp")?;
            for &(s, sp) in &self.pairs {
                writeln!(w, "{s},{sp}")?;
            }
            w.flush()
        };
        write_all(&mut w).map_err(|e| GridError::io(path, e))?;

        let meta = meta_path(path);
        let text = format!("seed = {}\nn = {}\nsource = {}\n", self.seed, self.pairs.len(), self.source);
        fs::write(&meta, text).map_err(|e| GridError::io(&meta, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| GridError::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "s,sp" => {}
            _ => return Err(GridError::Dataset("missing `s,sp` header".into())),
        }
        let mut pairs = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| GridError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |tok: Option<&str>| -> Result<usize, GridError> {
                tok.and_then(|t| t.trim().parse().ok())
                    .ok_or_else(|| GridError::Dataset(format!("bad row {}: {line:?}", i + 2)))
            };
            let mut toks = line.split(',');
            let s = parse(toks.next())?;
            let sp = parse(toks.next())?;
            pairs.push((s, sp));
        }

        let mut seed = 0;
        let mut source = String::new();
        let meta = meta_path(path);
        if let Ok(text) = fs::read_to_string(&meta) {
            for line in text.lines() {
                if let Some((k, v)) = line.split_once('=') {
                    match k.trim() {
                        "seed" => seed = v.trim().parse().unwrap_or(0),
                        "source" => source = v.trim().to_string(),
                        _ => {}
                    }
                }
            }
        }
        Ok(TransitionDataset { pairs, seed, source })
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(".meta");
    PathBuf::from(name)
}

pub fn sample_transitions(model: &TransitionModel, n: usize, seed: u64) -> TransitionDataset {
    sample_transitions_from(model, n, seed, "")
}

pub fn sample_transitions_from(
    model: &TransitionModel,
    n: usize,
    seed: u64,
    source: &str,
) -> TransitionDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_states = model.num_states();
    let pairs = (0..n)
        .map(|_| {
            let s = rng.random_range(0..num_states);
            (s, model.sample_next(s, &mut rng))
        })
        .collect();
    TransitionDataset { pairs, seed, source: source.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Cell coordinates rescaled to `[-1, 1]` over the free-cell bounding box.
    Xy,
    OneHot,
}

impl FeatureMode {
    pub fn dim(self, world: &GridWorld) -> usize {
        match self {
            FeatureMode::Xy => 2,
            FeatureMode::OneHot => world.num_states(),
        }
    }
}

pub fn state_features(world: &GridWorld, s: usize, mode: FeatureMode) -> Result<Vec<f64>, GridError> {
    let (x, y) = world.coords(s)?;
    Ok(match mode {
        FeatureMode::OneHot => {
            let mut v = vec![0.0; world.num_states()];
            v[s] = 1.0;
            v
        }
        FeatureMode::Xy => {
            let (xmin, xmax) = bounds(world.coords.iter().map(|c| c.0));
            let (ymin, ymax) = bounds(world.coords.iter().map(|c| c.1));
            vec![rescale(x, xmin, xmax), rescale(y, ymin, ymax)]
        }
    })
}

/// Feature matrix with one row per state.
pub fn feature_matrix(world: &GridWorld, mode: FeatureMode) -> Array2<f64> {
    let n = world.num_states();
    let dim = mode.dim(world);
    let mut out = Array2::zeros((n, dim));
    for s in 0..n {
        let f = state_features(world, s, mode).expect("state id in range");
        for (k, v) in f.into_iter().enumerate() {
            out[[s, k]] = v;
        }
    }
    out
}

fn bounds(it: impl Iterator<Item = usize>) -> (usize, usize) {
    it.fold((usize::MAX, 0), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn rescale(v: usize, lo: usize, hi: usize) -> f64 {
    if hi == lo {
        0.0
    } else {
        2.0 * (v - lo) as f64 / (hi - lo) as f64 - 1.0
    }
}
