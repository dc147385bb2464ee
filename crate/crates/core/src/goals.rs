//! Goal grids: procedural houses, the plain-text goal file, and train/test splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{BlockType, Dims};

const FILE_MAGIC: &str = "mbag-goals";
const FILE_VERSION: &str = "v1";

/// The hidden goal: one block type per cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GoalGrid {
    pub dims: Dims,
    pub cells: Vec<BlockType>,
}

impl GoalGrid {
    /// Checked constructor: at least one solid cell and an air margin on the
    /// four lateral faces.
    pub fn new(dims: Dims, cells: Vec<BlockType>) -> Result<Self> {
        let g = Self::from_cells_unchecked(dims, cells);
        g.validate()?;
        Ok(g)
    }

    /// No invariant checks beyond length; for toy worlds in tests.
    pub fn from_cells_unchecked(dims: Dims, cells: Vec<BlockType>) -> Self {
        assert_eq!(cells.len(), dims.volume(), "goal cell count");
        GoalGrid { dims, cells }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.dims.volume() {
            return Err(Error::Format(format!(
                "goal has {} cells, dims {} need {}",
                self.cells.len(),
                self.dims,
                self.dims.volume()
            )));
        }
        if self.cells.iter().all(|b| b.is_air()) {
            return Err(Error::Format("goal has no solid cells".into()));
        }
        let Dims { w, h, d } = self.dims;
        for y in 0..h {
            for z in 0..d {
                for x in 0..w {
                    let lateral = x == 0 || z == 0 || x + 1 == w || z + 1 == d;
                    if lateral && !self.cells[(y * d + z) * w + x].is_air() {
                        return Err(Error::Format(format!(
                            "goal cell ({x},{y},{z}) is inside the lateral air margin"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> BlockType {
        let Dims { w, d, .. } = self.dims;
        self.cells[(y * d + z) * w + x]
    }

    fn set(&mut self, x: usize, y: usize, z: usize, b: BlockType) {
        let Dims { w, d, .. } = self.dims;
        self.cells[(y * d + z) * w + x] = b;
    }

    pub fn num_solid(&self) -> usize {
        self.cells.iter().filter(|b| !b.is_air()).count()
    }

    /// Applies a block-type permutation (`perm[b]` is the new type of `b`).
    pub fn permuted(&self, perm: &[u8]) -> GoalGrid {
        GoalGrid {
            dims: self.dims,
            cells: self.cells.iter().map(|b| BlockType(perm[b.index()])).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Test,
    /// Loaded from a file or freshly generated; not yet assigned.
    Unsplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GoalSet {
    pub goals: Vec<GoalGrid>,
    pub num_block_types: usize,
    pub tag: SplitTag,
}

impl GoalSet {
    pub fn new(goals: Vec<GoalGrid>, num_block_types: usize, tag: SplitTag) -> Result<Self> {
        let Some(first) = goals.first() else {
            return Err(Error::Empty("goal set".into()));
        };
        let dims = first.dims;
        if let Some(g) = goals.iter().find(|g| g.dims != dims) {
            return Err(Error::Format(format!(
                "goal dims differ within set: {} vs {}",
                dims, g.dims
            )));
        }
        if let Some(b) = goals
            .iter()
            .flat_map(|g| g.cells.iter())
            .find(|b| b.index() >= num_block_types)
        {
            return Err(Error::Format(format!(
                "block code {} out of range for {} block types",
                b.0, num_block_types
            )));
        }
        Ok(GoalSet {
            goals,
            num_block_types,
            tag,
        })
    }

    pub fn dims(&self) -> Dims {
        self.goals[0].dims
    }

    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    pub fn with_tag(mut self, tag: SplitTag) -> Self {
        self.tag = tag;
        self
    }
}

// ---------------------------------------------------------------------------
// Procedural houses
// ---------------------------------------------------------------------------

/// A seeded house: floor, four walls with a door, optional window, and a
/// flat or stepped roof, with per-component block types.
pub fn generate_house(seed: u64, dims: Dims, num_block_types: usize) -> Result<GoalGrid> {
    let Dims { w, h, d } = dims;
    if w < 6 || d < 6 || h < 4 {
        return Err(Error::Config(format!(
            "house needs a 4x4x4 interior inside the margin, got grid {dims}"
        )));
    }
    if num_block_types < 2 {
        return Err(Error::Config("houses need at least one solid block type".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
    let solids = (num_block_types - 1) as u8;
    let pick = |rng: &mut ChaCha8Rng| BlockType(rng.random_range(1..=solids));

    let floor = pick(&mut rng);
    let wall = pick(&mut rng);
    let roof = if rng.random_bool(0.5) { wall } else { pick(&mut rng) };

    // interior rectangle inside the lateral margin
    let (x0, x1, z0, z1) = (1, w - 2, 1, d - 2);
    let wall_height = rng.random_range(2..=h - 2);
    let mut g = GoalGrid {
        dims,
        cells: vec![BlockType::AIR; dims.volume()],
    };

    for z in z0..=z1 {
        for x in x0..=x1 {
            g.set(x, 0, z, floor);
        }
    }
    for y in 1..=wall_height {
        for z in z0..=z1 {
            for x in x0..=x1 {
                if x == x0 || x == x1 || z == z0 || z == z1 {
                    g.set(x, y, z, wall);
                }
            }
        }
    }

    let roof_y = wall_height + 1;
    for z in z0..=z1 {
        for x in x0..=x1 {
            g.set(x, roof_y, z, roof);
        }
    }
    let stepped = roof_y + 1 < h && x1 - x0 >= 2 && z1 - z0 >= 2 && rng.random_bool(0.5);
    if stepped {
        for z in z0 + 1..z1 {
            for x in x0 + 1..x1 {
                g.set(x, roof_y + 1, z, roof);
            }
        }
    }

    // door: 1 wide, 2 tall, never on a corner column
    let door_side = rng.random_range(0..4u8);
    let (dx, dz) = wall_cell(&mut rng, door_side, x0, x1, z0, z1);
    for y in 1..=2 {
        g.set(dx, y, dz, BlockType::AIR);
    }
    if wall_height >= 3 && rng.random_bool(0.5) {
        let side = (door_side + rng.random_range(1..4u8)) % 4;
        let (wx, wz) = wall_cell(&mut rng, side, x0, x1, z0, z1);
        g.set(wx, 2, wz, BlockType::AIR);
    }
    g.validate()?;
    Ok(g)
}

fn wall_cell(
    rng: &mut ChaCha8Rng,
    side: u8,
    x0: usize,
    x1: usize,
    z0: usize,
    z1: usize,
) -> (usize, usize) {
    match side {
        0 => (rng.random_range(x0 + 1..x1), z0),
        1 => (rng.random_range(x0 + 1..x1), z1),
        2 => (x0, rng.random_range(z0 + 1..z1)),
        _ => (x1, rng.random_range(z0 + 1..z1)),
    }
}

/// `n` houses from consecutive seeds starting at `seed`.
pub fn generate_set(seed: u64, n: usize, dims: Dims, num_block_types: usize) -> Result<GoalSet> {
    let goals = (0..n as u64)
        .map(|i| generate_house(seed.wrapping_add(i), dims, num_block_types))
        .collect::<Result<Vec<_>>>()?;
    GoalSet::new(goals, num_block_types, SplitTag::Unsplit)
}

// ---------------------------------------------------------------------------
// Goal file
// ---------------------------------------------------------------------------

pub fn format_goals(set: &GoalSet) -> Result<String> {
    let dims = set.dims();
    if set.goals.iter().any(|g| g.dims != dims) {
        return Err(Error::Format("goal dims differ within set".into()));
    }
    let Dims { w, h, d } = dims;
    let mut out = String::new();
    writeln!(
        out,
        "{FILE_MAGIC} {FILE_VERSION} {w} {h} {d} {} {}",
        set.num_block_types,
        set.goals.len()
    )
    .unwrap();
    for g in &set.goals {
        out.push('\n');
        for row in g.cells.chunks(w) {
            let line: Vec<String> = row.iter().map(|b| b.0.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn parse_goals(text: &str) -> Result<GoalSet> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let Some((_, header)) = lines.next() else {
        return Err(Error::Format("empty goal file".into()));
    };
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 7 || fields[0] != FILE_MAGIC || fields[1] != FILE_VERSION {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected `{FILE_MAGIC} {FILE_VERSION} W H D B N` header"),
        });
    }
    let num = |i: usize| -> Result<usize> {
        fields[i].parse().map_err(|_| Error::Parse {
            line: 1,
            msg: format!("bad header field `{}`", fields[i]),
        })
    };
    let dims = Dims::new(num(2)?, num(3)?, num(4)?);
    let num_block_types = num(5)?;
    let n = num(6)?;
    if dims.volume() == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: "zero-sized grid".into(),
        });
    }
    if n == 0 {
        return Err(Error::Format("goal file declares zero goals".into()));
    }
    let mut goals = Vec::with_capacity(n);
    for gi in 0..n {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() => {}
            Some((ln, _)) => {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("expected blank line before goal {gi}"),
                })
            }
            None => {
                return Err(Error::Format(format!(
                    "file ends before goal {gi} of {n}"
                )))
            }
        }
        let mut cells = Vec::with_capacity(dims.volume());
        for _ in 0..dims.h * dims.d {
            let Some((ln, l)) = lines.next() else {
                return Err(Error::Format(format!("goal {gi} is truncated")));
            };
            let row: Vec<&str> = l.split_whitespace().collect();
            if row.len() != dims.w {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("expected {} codes, found {}", dims.w, row.len()),
                });
            }
            for tok in row {
                let code: usize = tok.parse().map_err(|_| Error::Parse {
                    line: ln,
                    msg: format!("bad block code `{tok}`"),
                })?;
                if code >= num_block_types {
                    return Err(Error::Parse {
                        line: ln,
                        msg: format!("block code {code} out of range for {num_block_types} types"),
                    });
                }
                cells.push(BlockType(code as u8));
            }
        }
        goals.push(GoalGrid::new(dims, cells)?);
    }
    if let Some((ln, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Parse {
            line: ln,
            msg: format!("unexpected trailing content `{}`", l.trim()),
        });
    }
    GoalSet::new(goals, num_block_types, SplitTag::Unsplit)
}

pub fn save_goals(set: &GoalSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_goals(set)?).map_err(|e| Error::file(path, e))
}

pub fn load_goals(path: impl AsRef<Path>) -> Result<GoalSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_goals(&text)
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Seeded train/test partition. Identical goals always land on the same
/// side, so the test count is exact only when the set has no duplicates.
pub fn split(set: &GoalSet, test_fraction: f64, seed: u64) -> Result<(GoalSet, GoalSet)> {
    if set.len() < 2 {
        return Err(Error::Config("need at least two goals to split".into()));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction {test_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = set.len();
    let target = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);

    let mut groups: BTreeMap<&GoalGrid, Vec<usize>> = BTreeMap::new();
    for (i, g) in set.goals.iter().enumerate() {
        groups.entry(g).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    // restore first-occurrence order before shuffling so the result
    // depends only on the input order and the seed
    groups.sort_by_key(|g| g[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    groups.shuffle(&mut rng);

    let mut in_test = vec![false; n];
    let mut taken = 0;
    for g in &groups {
        if taken + g.len() <= target {
            taken += g.len();
            for &i in g {
                in_test[i] = true;
            }
        }
        if taken == target {
            break;
        }
    }
    if taken == 0 {
        for &i in &groups[0] {
            in_test[i] = true;
        }
    }
    let pick = |want: bool| -> Vec<GoalGrid> {
        set.goals
            .iter()
            .zip(&in_test)
            .filter(|(_, &t)| t == want)
            .map(|(g, _)| g.clone())
            .collect()
    };
    let train = GoalSet::new(pick(false), set.num_block_types, SplitTag::Train)
        .map_err(|_| Error::Config("split left the train side empty".into()))?;
    let test = GoalSet::new(pick(true), set.num_block_types, SplitTag::Test)?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    const DESK: Dims = Dims::new(6, 6, 6);

    #[test]
    fn house_is_deterministic() {
        let a = generate_house(0, DESK, 4).unwrap();
        let b = generate_house(0, DESK, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.num_solid() > 0);
    }

    #[test]
    fn houses_are_diverse() {
        let distinct: HashSet<GoalGrid> = (0..1000)
            .map(|s| generate_house(s, DESK, 4).unwrap())
            .collect();
        assert!(distinct.len() >= 100, "only {} distinct", distinct.len());
    }

    #[test]
    fn every_face_touches_air() {
        for seed in 0..200 {
            let g = generate_house(seed, DESK, 4).unwrap();
            let Dims { w, h, d } = g.dims;
            let faces: [&dyn Fn(usize, usize, usize) -> bool; 6] = [
                &|x, _, _| x == 0,
                &|x, _, _| x == w - 1,
                &|_, y, _| y == 0,
                &|_, y, _| y == h - 1,
                &|_, _, z| z == 0,
                &|_, _, z| z == d - 1,
            ];
            for face in faces {
                let mut any_air = false;
                for y in 0..h {
                    for z in 0..d {
                        for x in 0..w {
                            if face(x, y, z) && g.get(x, y, z).is_air() {
                                any_air = true;
                            }
                        }
                    }
                }
                assert!(any_air, "seed {seed}");
            }
        }
    }

    #[test]
    fn too_small_grid_rejected() {
        assert!(generate_house(0, Dims::new(5, 6, 6), 4).is_err());
        assert!(generate_house(0, Dims::new(6, 3, 6), 4).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let set = generate_set(3, 5, DESK, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.txt");
        save_goals(&set, &p).unwrap();
        let back = load_goals(&p).unwrap();
        assert_eq!(back, set);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("mbag-goals v1 6 6 6 4 5\n\n"));
        assert!(!text.contains(" \n"));
    }

    #[test]
    fn bad_code_names_its_line() {
        let set = generate_set(0, 1, DESK, 4).unwrap();
        let mut text = format_goals(&set).unwrap();
        // line 3 is the first grid row
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[2] = "0 0 99 0 0 0".into();
        text = lines.join("\n") + "\n";
        match parse_goals(&text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("99"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_format_error() {
        assert!(matches!(parse_goals(""), Err(Error::Format(_))));
    }

    #[test]
    fn mixed_dims_rejected() {
        let a = generate_house(0, DESK, 4).unwrap();
        let b = generate_house(0, Dims::new(7, 6, 6), 4).unwrap();
        assert!(matches!(
            GoalSet::new(vec![a, b], 4, SplitTag::Unsplit),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn split_counts_and_determinism() {
        let set = generate_set(100, 10, DESK, 4).unwrap();
        let distinct: HashSet<_> = set.goals.iter().collect();
        assert_eq!(distinct.len(), 10);
        let (train, test) = split(&set, 0.2, 5).unwrap();
        assert_eq!((train.len(), test.len()), (8, 2));
        let (train2, test2) = split(&set, 0.2, 5).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        let mut all: Vec<_> = train.goals.iter().chain(&test.goals).cloned().collect();
        let mut orig = set.goals.clone();
        all.sort();
        orig.sort();
        assert_eq!(all, orig);
        assert_eq!(train.tag, SplitTag::Train);
        assert_eq!(test.tag, SplitTag::Test);
    }

    #[test]
    fn split_keeps_duplicates_together() {
        let a = generate_house(1, DESK, 4).unwrap();
        let b = generate_house(2, DESK, 4).unwrap();
        let set = GoalSet::new(vec![a.clone(), a.clone(), b.clone(), a], 4, SplitTag::Unsplit).unwrap();
        for seed in 0..20 {
            let (train, test) = split(&set, 0.25, seed).unwrap();
            let tr: HashSet<_> = train.goals.iter().collect();
            assert!(test.goals.iter().all(|g| !tr.contains(g)));
        }
    }

    #[test]
    fn split_rejects_tiny_sets() {
        let set = generate_set(0, 1, DESK, 4).unwrap();
        assert!(split(&set, 0.5, 0).is_err());
    }
}
