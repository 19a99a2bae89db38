//! Equirectangular tile grid, viewport tile sets and the rectangular lattice
//! decomposition of viewport shapes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use crate::error::{Error, Result};

/// Tile coordinate. Orders row-major: by `y`, then by `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tile {
    pub x: i64,
    pub y: i64,
}

impl Tile {
    pub const fn new(x: i64, y: i64) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dx: i64, dy: i64) -> Self {
        Self::new(self.x + dx, self.y + dy)
    }
}

impl Ord for Tile {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for Tile {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Tile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

/// Width and height in tiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub width: usize,
    pub height: usize,
}

impl Shape {
    pub const fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn area(self) -> usize {
        self.width * self.height
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Tile grid with coordinates `0..width` by `0..height`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    /// Wrap horizontally (yaw is periodic). Off by default.
    pub wrap: bool,
}

impl Grid {
    pub const fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            wrap: false,
        }
    }

    pub fn wrapping(mut self) -> Self {
        self.wrap = true;
        self
    }

    /// Largest horizontal coordinate.
    pub fn max_x(&self) -> i64 {
        self.width as i64 - 1
    }

    /// Largest vertical coordinate.
    pub fn max_y(&self) -> i64 {
        self.height as i64 - 1
    }

    pub fn contains(&self, t: Tile) -> bool {
        (0..self.width as i64).contains(&t.x) && (0..self.height as i64).contains(&t.y)
    }

    fn place(&self, t: Tile) -> Result<Tile> {
        let t = if self.wrap {
            Tile::new(t.x.rem_euclid(self.width as i64), t.y)
        } else {
            t
        };
        if self.contains(t) {
            Ok(t)
        } else {
            Err(Error::OutOfGrid {
                x: t.x,
                y: t.y,
                width: self.width,
                height: self.height,
            })
        }
    }
}

/// All tiles of the `shape.width x shape.height` rectangle with top-left corner `anchor`.
pub fn rect_tiles(anchor: Tile, shape: Shape) -> BTreeSet<Tile> {
    let mut out = BTreeSet::new();
    for dy in 0..shape.height as i64 {
        for dx in 0..shape.width as i64 {
            out.insert(anchor.offset(dx, dy));
        }
    }
    out
}

/// Top-left corner of a rectangle of `shape` centered on `center`. For even
/// sizes the center sits left of / above the middle.
pub fn anchor_for_center(center: Tile, shape: Shape) -> Tile {
    center.offset(
        -(shape.width.div_ceil(2) as i64 - 1),
        -(shape.height.div_ceil(2) as i64 - 1),
    )
}

/// The rectangle of `shape` centered on `center`.
pub fn viewport_tiles(center: Tile, shape: Shape, grid: &Grid) -> Result<BTreeSet<Tile>> {
    if shape.area() == 0 {
        return Err(Error::InvalidArgument("empty viewport shape".into()));
    }
    rect_tiles(anchor_for_center(center, shape), shape)
        .into_iter()
        .map(|t| grid.place(t))
        .collect()
}

/// A viewport: its FoV rectangle, exact scope and the predictive tile set
/// actually transmitted ahead of playback.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewportSpec {
    pub id: usize,
    pub center: Tile,
    pub fov: BTreeSet<Tile>,
    pub scope_tiles: BTreeSet<Tile>,
    /// Predictive set, `fov ⊆ tiles ⊆ scope_tiles`.
    pub tiles: BTreeSet<Tile>,
}

impl ViewportSpec {
    /// Builds a viewport whose FoV and scope are both centered on `center`,
    /// with `predictive` tiles selected by [`predictive_tiles`].
    pub fn new(
        id: usize,
        center: Tile,
        fov: Shape,
        scope: Shape,
        predictive: usize,
        grid: &Grid,
    ) -> Result<Self> {
        let fov_tiles = viewport_tiles(center, fov, grid)?;
        let scope_tiles = viewport_tiles(center, scope, grid)?;
        if !fov_tiles.is_subset(&scope_tiles) {
            return Err(Error::InvalidArgument(format!(
                "FoV {fov} does not fit inside scope {scope}"
            )));
        }
        let mut vp = Self {
            id,
            center,
            tiles: fov_tiles.clone(),
            fov: fov_tiles,
            scope_tiles,
        };
        vp.tiles = predictive_tiles(&vp, predictive)?;
        Ok(vp)
    }

    /// A viewport whose predictive set is exactly the given rectangle (FoV and
    /// scope coincide).
    pub fn rectangle(id: usize, anchor: Tile, shape: Shape) -> Self {
        let tiles = rect_tiles(anchor, shape);
        let center = anchor_for_center(Tile::new(0, 0), shape);
        Self {
            id,
            center: Tile::new(anchor.x - center.x, anchor.y - center.y),
            fov: tiles.clone(),
            scope_tiles: tiles.clone(),
            tiles,
        }
    }

    /// A viewport transmitting an arbitrary tile set.
    pub fn from_tiles(id: usize, tiles: BTreeSet<Tile>) -> Self {
        let center = tiles.iter().next().copied().unwrap_or(Tile::new(0, 0));
        Self {
            id,
            center,
            fov: tiles.clone(),
            scope_tiles: tiles.clone(),
            tiles,
        }
    }

    pub fn fov_len(&self) -> usize {
        self.fov.len()
    }

    pub fn scope_len(&self) -> usize {
        self.scope_tiles.len()
    }
}

/// The FoV plus the `n_p - M` scope tiles nearest the viewport center.
///
/// Distance is Euclidean between tile centers; ties go to the smaller `y`,
/// then the smaller `x`.
pub fn predictive_tiles(viewport: &ViewportSpec, n_p: usize) -> Result<BTreeSet<Tile>> {
    let m = viewport.fov.len();
    let s = viewport.scope_tiles.len();
    if n_p < m || n_p > s {
        return Err(Error::InvalidArgument(format!(
            "predictive tile count {n_p} outside [{m}, {s}]"
        )));
    }
    let c = viewport.center;
    let mut extra: Vec<Tile> = viewport
        .scope_tiles
        .difference(&viewport.fov)
        .copied()
        .collect();
    extra.sort_by_key(|t| {
        let (dx, dy) = (t.x - c.x, t.y - c.y);
        (dx * dx + dy * dy, t.y, t.x)
    });
    let mut out = viewport.fov.clone();
    out.extend(extra.into_iter().take(n_p - m));
    Ok(out)
}

/// Owner viewports of every requested tile.
pub fn classify_tiles(viewports: &[ViewportSpec]) -> BTreeMap<Tile, BTreeSet<usize>> {
    let mut owners: BTreeMap<Tile, BTreeSet<usize>> = BTreeMap::new();
    for vp in viewports {
        for &t in &vp.tiles {
            owners.entry(t).or_default().insert(vp.id);
        }
    }
    owners
}

pub fn is_isolated(owners: &BTreeSet<usize>) -> bool {
    owners.len() == 1
}

/// Number of tiles owned by exactly the viewports in `set`.
///
/// With one viewport this counts its isolated tiles; with two or more it
/// counts the coexisting tiles shared by that set and nobody else.
pub fn exclusive_count(classes: &BTreeMap<Tile, BTreeSet<usize>>, set: &[usize]) -> usize {
    let want: BTreeSet<usize> = set.iter().copied().collect();
    classes.values().filter(|owners| **owners == want).count()
}

/// Translates a tile set so its bounding box starts at the origin. Returns the
/// translation offset and the normalized set.
pub fn normalize(tiles: &BTreeSet<Tile>) -> (Tile, BTreeSet<Tile>) {
    let min_x = tiles.iter().map(|t| t.x).min().unwrap_or(0);
    let min_y = tiles.iter().map(|t| t.y).min().unwrap_or(0);
    let shifted = tiles.iter().map(|t| t.offset(-min_x, -min_y)).collect();
    (Tile::new(min_x, min_y), shifted)
}

/// A rectangular lattice within a normalized viewport shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lattice {
    /// Top-left corner relative to the normalized shape.
    pub anchor: Tile,
    pub shape: Shape,
}

impl Lattice {
    pub fn tiles(&self) -> BTreeSet<Tile> {
        rect_tiles(self.anchor, self.shape)
    }

    /// Instance of this lattice in a viewport whose shape is offset by `origin`.
    pub fn instance(&self, origin: Tile) -> BTreeSet<Tile> {
        rect_tiles(self.anchor.offset(origin.x, origin.y), self.shape)
    }
}

/// Splits a shape into rectangles by repeatedly removing the largest one.
///
/// Ties on area go to the wider rectangle, then the topmost, then the leftmost.
pub fn decompose_lattices(shape: &BTreeSet<Tile>) -> Result<Vec<Lattice>> {
    if shape.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot decompose an empty shape".into(),
        ));
    }
    let (_, mut rest) = normalize(shape);
    let mut out = Vec::new();
    while !rest.is_empty() {
        let best = largest_rectangle(&rest);
        for t in best.tiles() {
            rest.remove(&t);
        }
        out.push(best);
    }
    Ok(out)
}

fn largest_rectangle(tiles: &BTreeSet<Tile>) -> Lattice {
    let mut best: Option<(Lattice, (usize, usize, i64, i64))> = None;
    // Key: larger area, wider, then smaller y, smaller x.
    let better = |cand: (usize, usize, i64, i64), cur: (usize, usize, i64, i64)| {
        (cand.0, cand.1, -cand.2, -cand.3) > (cur.0, cur.1, -cur.2, -cur.3)
    };
    for &corner in tiles {
        // Widest run starting at this corner.
        let mut run = 0;
        while tiles.contains(&corner.offset(run, 0)) {
            run += 1;
        }
        let mut width = run;
        let mut height = 0;
        while width > 0 {
            let row = corner.offset(0, height);
            let mut w = 0;
            while w < width && tiles.contains(&row.offset(w, 0)) {
                w += 1;
            }
            width = w;
            if width == 0 {
                break;
            }
            height += 1;
            let key = (
                (width * height) as usize,
                width as usize,
                corner.y,
                corner.x,
            );
            // For a fixed corner and height the widest rectangle dominates.
            if best.is_none_or(|(_, cur)| better(key, cur)) {
                best = Some((
                    Lattice {
                        anchor: corner,
                        shape: Shape::new(width as usize, height as usize),
                    },
                    key,
                ));
            }
        }
    }
    best.expect("non-empty tile set has a rectangle").0
}

/// Parses a viewport layout: one `x y` (or `x,y`) center per line; blank
/// lines and `#` comments are ignored.
pub fn parse_layout(text: &str) -> Result<Vec<Tile>> {
    let mut centers = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 2 {
            return Err(parse_err(format!(
                "expected two coordinates, found {:?}",
                line
            )));
        }
        let coord = |s: &str| {
            s.parse::<i64>()
                .map_err(|e| parse_err(format!("bad coordinate {s:?}: {e}")))
        };
        centers.push(Tile::new(coord(fields[0])?, coord(fields[1])?));
    }
    Ok(centers)
}
