//! Multicast group construction.
//!
//! MLMSG combines, for each rectangular lattice of the common viewport shape,
//! every tile whose coordinates agree modulo the lattice size: an `h x v`
//! rectangle holds exactly one tile of each residue class, so each lattice
//! yields `h * v` groups in which every viewport appears exactly once. BG is
//! the uni-stream baseline with one group per distinct tile.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use crate::error::{Error, Result};
use crate::tiling::{normalize, Lattice, Tile, ViewportSpec};

/// One tile stream of a group, shared by every listed viewport.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stream {
    pub tile: Tile,
    pub viewports: Vec<usize>,
    pub users: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Group {
    pub id: usize,
    /// Index of the lattice this group was built from (MLMSG only).
    pub lattice: Option<usize>,
    pub streams: Vec<Stream>,
}

impl Group {
    /// Pilot length: one orthogonal pilot per stream.
    pub fn pilot_len(&self) -> usize {
        self.streams.len()
    }

    pub fn viewports(&self) -> BTreeSet<usize> {
        self.streams
            .iter()
            .flat_map(|s| s.viewports.iter().copied())
            .collect()
    }

    pub fn user_count(&self) -> usize {
        self.streams.iter().map(|s| s.users.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupingMode {
    Mlmsg,
    Basic,
}

impl fmt::Display for GroupingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GroupingMode::Mlmsg => "MLMSG",
            GroupingMode::Basic => "BG",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupingResult {
    pub mode: GroupingMode,
    pub groups: Vec<Group>,
    /// Lattices of the common shape (empty for BG).
    pub lattices: Vec<Lattice>,
}

impl GroupingResult {
    pub fn total_pilots(&self) -> usize {
        self.groups.iter().map(Group::pilot_len).sum()
    }

    /// Number of groups built from each lattice, in lattice order.
    pub fn groups_per_lattice(&self) -> Vec<usize> {
        let mut counts = vec![0; self.lattices.len()];
        for g in &self.groups {
            if let Some(l) = g.lattice {
                counts[l] += 1;
            }
        }
        counts
    }
}

#[derive(Default)]
struct StreamAcc {
    viewports: BTreeSet<usize>,
    users: Vec<usize>,
}

fn finish_streams(acc: BTreeMap<Tile, StreamAcc>) -> Vec<Stream> {
    acc.into_iter()
        .map(|(tile, s)| Stream {
            tile,
            viewports: s.viewports.into_iter().collect(),
            users: s.users,
        })
        .collect()
}

fn check_members(viewports: &[ViewportSpec], members: &[Vec<usize>]) -> Result<()> {
    if viewports.len() != members.len() {
        return Err(Error::InvalidArgument(format!(
            "{} viewports but {} member lists",
            viewports.len(),
            members.len()
        )));
    }
    Ok(())
}

/// Multi-lattice multi-stream grouping.
///
/// `members[i]` lists the users of `viewports[i]`. All viewports must share
/// one shape up to translation, and `lattices` must partition that shape.
pub fn mlmsg_group(
    lattices: &[Lattice],
    viewports: &[ViewportSpec],
    members: &[Vec<usize>],
) -> Result<GroupingResult> {
    check_members(viewports, members)?;
    let Some(first) = viewports.first() else {
        return Ok(GroupingResult {
            mode: GroupingMode::Mlmsg,
            groups: Vec::new(),
            lattices: lattices.to_vec(),
        });
    };
    let (_, canonical) = normalize(&first.tiles);
    let mut origins = Vec::with_capacity(viewports.len());
    for vp in viewports {
        let (origin, shape) = normalize(&vp.tiles);
        if shape != canonical {
            return Err(Error::InvalidArgument(format!(
                "viewport {} has a different shape from viewport {}",
                vp.id, first.id
            )));
        }
        origins.push(origin);
    }
    let mut covered = BTreeSet::new();
    for l in lattices {
        for t in l.tiles() {
            if !canonical.contains(&t) || !covered.insert(t) {
                return Err(Error::InvalidArgument(format!(
                    "lattice {}x{} at {} does not partition the viewport shape",
                    l.shape.width, l.shape.height, l.anchor
                )));
            }
        }
    }
    if covered.len() != canonical.len() {
        return Err(Error::InvalidArgument(
            "lattices leave tiles uncovered".into(),
        ));
    }

    let mut groups = Vec::new();
    for (li, lattice) in lattices.iter().enumerate() {
        let (h, v) = (lattice.shape.width as i64, lattice.shape.height as i64);
        // Residue (y mod v, x mod h) -> tile -> stream.
        let mut classes: BTreeMap<(i64, i64), BTreeMap<Tile, StreamAcc>> = BTreeMap::new();
        for ((vp, users), origin) in viewports.iter().zip(members).zip(&origins) {
            for t in lattice.instance(*origin) {
                let key = (t.y.rem_euclid(v), t.x.rem_euclid(h));
                let acc = classes.entry(key).or_default().entry(t).or_default();
                acc.viewports.insert(vp.id);
                acc.users.extend_from_slice(users);
            }
        }
        for (_, streams) in classes {
            groups.push(Group {
                id: groups.len(),
                lattice: Some(li),
                streams: finish_streams(streams),
            });
        }
    }
    Ok(GroupingResult {
        mode: GroupingMode::Mlmsg,
        groups,
        lattices: lattices.to_vec(),
    })
}

/// Basic grouping: one single-stream group per distinct requested tile.
pub fn bg_group(viewports: &[ViewportSpec], members: &[Vec<usize>]) -> Result<GroupingResult> {
    check_members(viewports, members)?;
    let mut tiles: BTreeMap<Tile, StreamAcc> = BTreeMap::new();
    for (vp, users) in viewports.iter().zip(members) {
        for &t in &vp.tiles {
            let acc = tiles.entry(t).or_default();
            acc.viewports.insert(vp.id);
            acc.users.extend_from_slice(users);
        }
    }
    let groups = finish_streams(tiles)
        .into_iter()
        .enumerate()
        .map(|(id, s)| Group {
            id,
            lattice: None,
            streams: vec![s],
        })
        .collect();
    Ok(GroupingResult {
        mode: GroupingMode::Basic,
        groups,
        lattices: Vec::new(),
    })
}

/// Constraint violations found in a grouping.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// `(group, user)`: the user is served by more than one stream of the group.
    pub user_conflicts: Vec<(usize, usize)>,
    /// `(group, viewport)`: the viewport owns more than one stream of the group.
    pub viewport_conflicts: Vec<(usize, usize)>,
    /// Requested `(tile, viewport)` pairs never delivered.
    pub missing: Vec<(Tile, usize)>,
    /// `(tile, viewport)` pairs delivered more than once.
    pub duplicated: Vec<(Tile, usize)>,
    /// `(tile, viewport)` pairs delivered but not requested.
    pub unrequested: Vec<(Tile, usize)>,
    /// Groups that do not contain every viewport.
    pub incomplete: Vec<usize>,
}

impl Diagnostics {
    /// True when the stream constraints and exact cover all hold.
    /// Completeness is informational and not part of validity.
    pub fn is_valid(&self) -> bool {
        self.user_conflicts.is_empty()
            && self.viewport_conflicts.is_empty()
            && self.missing.is_empty()
            && self.duplicated.is_empty()
            && self.unrequested.is_empty()
    }

    pub fn violation_count(&self) -> usize {
        self.user_conflicts.len()
            + self.viewport_conflicts.len()
            + self.missing.len()
            + self.duplicated.len()
            + self.unrequested.len()
    }
}

pub fn validate_grouping(result: &GroupingResult, viewports: &[ViewportSpec]) -> Diagnostics {
    let mut diag = Diagnostics::default();
    let all_viewports: BTreeSet<usize> = viewports.iter().map(|v| v.id).collect();
    let mut delivered: BTreeMap<(Tile, usize), usize> = BTreeMap::new();
    for g in &result.groups {
        let mut seen_users = BTreeSet::new();
        let mut seen_viewports = BTreeSet::new();
        for s in &g.streams {
            for &u in &s.users {
                if !seen_users.insert(u) {
                    diag.user_conflicts.push((g.id, u));
                }
            }
            for &v in &s.viewports {
                if !seen_viewports.insert(v) {
                    diag.viewport_conflicts.push((g.id, v));
                }
                *delivered.entry((s.tile, v)).or_default() += 1;
            }
        }
        if seen_viewports != all_viewports {
            diag.incomplete.push(g.id);
        }
    }
    let mut requested = BTreeSet::new();
    for vp in viewports {
        for &t in &vp.tiles {
            requested.insert((t, vp.id));
            match delivered.get(&(t, vp.id)) {
                None => diag.missing.push((t, vp.id)),
                Some(&n) if n > 1 => diag.duplicated.push((t, vp.id)),
                _ => {}
            }
        }
    }
    diag.unrequested = delivered
        .keys()
        .filter(|k| !requested.contains(*k))
        .copied()
        .collect();
    diag
}

/// Smallest number of groups any valid grouping of these viewports can use,
/// found by exhaustive backtracking over `(tile, viewport)` assignments.
///
/// Exponential; meant for instances with a handful of viewports.
pub fn min_groups_exhaustive(viewports: &[ViewportSpec]) -> usize {
    let pairs: Vec<(Tile, usize)> = viewports
        .iter()
        .flat_map(|vp| vp.tiles.iter().map(move |&t| (t, vp.id)))
        .collect();
    if pairs.is_empty() {
        return 0;
    }
    (1..=pairs.len())
        .find(|&k| {
            let mut groups: Vec<BTreeSet<usize>> = Vec::new();
            assign(&pairs, 0, k, &mut groups)
        })
        .expect("one group per pair always works")
}

// Each group tracks the viewports it already serves; a pair may join a group
// only if its viewport is not there yet (one stream per viewport per group).
fn assign(
    pairs: &[(Tile, usize)],
    next: usize,
    limit: usize,
    groups: &mut Vec<BTreeSet<usize>>,
) -> bool {
    let Some(&(_, vp)) = pairs.get(next) else {
        return true;
    };
    for g in 0..groups.len() {
        if groups[g].insert(vp) {
            if assign(pairs, next + 1, limit, groups) {
                return true;
            }
            groups[g].remove(&vp);
        }
    }
    // Opening a new group: all empty groups are interchangeable, so try one.
    if groups.len() < limit {
        groups.push(BTreeSet::from([vp]));
        if assign(pairs, next + 1, limit, groups) {
            return true;
        }
        groups.pop();
    }
    false
}

/// Writes one row per (stream, viewport) pair.
pub fn write_grouping_csv<W: Write>(
    out: W,
    result: &GroupingResult,
    users_viewport: &[usize],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "stream", "tile_x", "tile_y", "viewport", "users"])?;
    for g in &result.groups {
        for (si, s) in g.streams.iter().enumerate() {
            for &v in &s.viewports {
                let count = s
                    .users
                    .iter()
                    .filter(|&&u| users_viewport.get(u) == Some(&v))
                    .count();
                w.write_record([
                    g.id.to_string(),
                    si.to_string(),
                    s.tile.x.to_string(),
                    s.tile.y.to_string(),
                    v.to_string(),
                    count.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tiling::{decompose_lattices, rect_tiles, Shape};

    fn rects(shape: Shape, anchors: &[(i64, i64)]) -> Vec<ViewportSpec> {
        anchors
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| ViewportSpec::rectangle(i, Tile::new(x, y), shape))
            .collect()
    }

    fn one_user_each(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| vec![i]).collect()
    }

    fn mlmsg(vps: &[ViewportSpec]) -> GroupingResult {
        let lattices = decompose_lattices(&vps[0].tiles).unwrap();
        mlmsg_group(&lattices, vps, &one_user_each(vps.len())).unwrap()
    }

    #[test]
    fn fmvc_six_by_five_origin_group() {
        // Every 4x3 placement inside a 6x5 region.
        let mut anchors = Vec::new();
        for y in 0..=2 {
            for x in 0..=2 {
                anchors.push((x, y));
            }
        }
        let vps = rects(Shape::new(4, 3), &anchors);
        let result = mlmsg(&vps);
        assert_eq!(result.groups.len(), 12);
        let g0 = result
            .groups
            .iter()
            .find(|g| g.streams.iter().any(|s| s.tile == Tile::new(0, 0)))
            .unwrap();
        let tiles: BTreeSet<Tile> = g0.streams.iter().map(|s| s.tile).collect();
        let expected: BTreeSet<Tile> = [(0, 0), (4, 0), (0, 3), (4, 3)]
            .iter()
            .map(|&(x, y)| Tile::new(x, y))
            .collect();
        assert_eq!(tiles, expected);
        let diag = validate_grouping(&result, &vps);
        assert!(diag.is_valid(), "{diag:?}");
        assert!(diag.incomplete.is_empty());
    }

    #[test]
    fn scattered_rectangles_need_twelve_groups() {
        let vps = rects(Shape::new(4, 3), &[(0, 0), (5, 1), (3, 6), (7, 8), (1, 2)]);
        let result = mlmsg(&vps);
        assert_eq!(result.groups.len(), 12);
        let diag = validate_grouping(&result, &vps);
        assert!(diag.is_valid());
        assert!(diag.incomplete.is_empty());
    }

    #[test]
    fn single_viewport_singletons() {
        let vps = rects(Shape::new(5, 4), &[(3, 4)]);
        let result = mlmsg(&vps);
        assert_eq!(result.groups.len(), 20);
        assert!(result.groups.iter().all(|g| g.pilot_len() == 1));
    }

    #[test]
    fn shared_tiles_merge_into_one_stream() {
        let vps = rects(Shape::new(2, 1), &[(0, 0), (1, 0)]);
        let result = mlmsg(&vps);
        // Residue x mod 2: {0: (0,0),(2,0)} and {1: (1,0) shared}.
        assert_eq!(result.groups.len(), 2);
        let pilots: Vec<usize> = result.groups.iter().map(Group::pilot_len).collect();
        assert_eq!(pilots, vec![2, 1]);
        assert_eq!(result.groups[1].streams[0].users, vec![0, 1]);
    }

    #[test]
    fn heterogeneous_shapes_rejected() {
        let mut vps = rects(Shape::new(4, 3), &[(0, 0)]);
        vps.push(ViewportSpec::rectangle(
            1,
            Tile::new(5, 5),
            Shape::new(3, 4),
        ));
        let lattices = decompose_lattices(&vps[0].tiles).unwrap();
        assert!(mlmsg_group(&lattices, &vps, &one_user_each(2)).is_err());
    }

    #[test]
    fn non_rectangular_groups_total_np() {
        let mut shape = rect_tiles(Tile::new(2, 2), Shape::new(4, 3));
        shape.extend([Tile::new(2, 5), Tile::new(3, 5), Tile::new(6, 3)]);
        let vps: Vec<_> = [(0, 0), (1, 0), (3, 2)]
            .iter()
            .enumerate()
            .map(|(i, &(dx, dy))| {
                ViewportSpec::from_tiles(i, shape.iter().map(|t| t.offset(dx, dy)).collect())
            })
            .collect();
        let result = mlmsg(&vps);
        assert_eq!(result.groups.len(), shape.len());
        assert_eq!(result.groups_per_lattice(), vec![12, 2, 1]);
        let diag = validate_grouping(&result, &vps);
        assert!(diag.is_valid(), "{diag:?}");
    }

    #[test]
    fn bg_counts() {
        let shape = Shape::new(5, 4);
        let disjoint = rects(shape, &[(0, 0), (6, 0), (0, 5)]);
        let bg = bg_group(&disjoint, &one_user_each(3)).unwrap();
        assert_eq!(bg.groups.len(), 60);
        assert!(bg.groups.iter().all(|g| g.pilot_len() == 1));

        let twins = rects(shape, &[(2, 2), (2, 2)]);
        let bg = bg_group(&twins, &one_user_each(2)).unwrap();
        assert_eq!(bg.groups.len(), 20);
        assert!(bg.groups.iter().all(|g| g.streams[0].users == vec![0, 1]));
    }

    #[test]
    fn bg_fmvc_union() {
        let mut anchors = Vec::new();
        for y in 0..=2 {
            for x in 0..=2 {
                anchors.push((x, y));
            }
        }
        let vps = rects(Shape::new(4, 3), &anchors);
        let bg = bg_group(&vps, &one_user_each(vps.len())).unwrap();
        assert_eq!(bg.groups.len(), 30);
        assert!(validate_grouping(&bg, &vps).is_valid());
    }

    #[test]
    fn detects_viewport_conflict() {
        let vps = rects(Shape::new(2, 1), &[(0, 0)]);
        let bad = GroupingResult {
            mode: GroupingMode::Mlmsg,
            lattices: Vec::new(),
            groups: vec![Group {
                id: 0,
                lattice: None,
                streams: vps[0]
                    .tiles
                    .iter()
                    .map(|&t| Stream {
                        tile: t,
                        viewports: vec![0],
                        users: vec![0],
                    })
                    .collect(),
            }],
        };
        let diag = validate_grouping(&bad, &vps);
        assert_eq!(diag.viewport_conflicts, vec![(0, 0)]);
        assert_eq!(diag.user_conflicts, vec![(0, 0)]);
        assert!(!diag.is_valid());
    }

    #[test]
    fn detects_cover_errors() {
        let vps = rects(Shape::new(2, 1), &[(0, 0)]);
        let mut result = mlmsg(&vps);
        result.groups.pop();
        let diag = validate_grouping(&result, &vps);
        assert_eq!(diag.missing.len(), 1);
        assert!(!diag.is_valid());
    }

    #[test]
    fn exhaustive_matches_area() {
        let vps = rects(Shape::new(2, 2), &[(0, 0), (1, 1), (2, 0)]);
        assert_eq!(min_groups_exhaustive(&vps), 4);
        assert_eq!(mlmsg(&vps).groups.len(), 4);
    }

    #[test]
    fn csv_rows() {
        let vps = rects(Shape::new(2, 1), &[(0, 0), (1, 0)]);
        let result = mlmsg(&vps);
        let mut buf = Vec::new();
        write_grouping_csv(&mut buf, &result, &[0, 1]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "group,stream,tile_x,tile_y,viewport,users"
        );
        // (0,0)/v0, (2,0)/v1, (1,0)/v0, (1,0)/v1
        assert_eq!(text.lines().count(), 5);
    }
}
