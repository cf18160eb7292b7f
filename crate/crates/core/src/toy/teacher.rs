//! Scripted noisy generator used to pretrain the toy base model.
//!
//! The teacher writes a reasoning trace of one compass word per slot (the
//! planned 3×3 grid cell), then realizes the plan as a scene. It fails in two
//! independent ways: a wrong plan (text failure) and a scene that strays from
//! the plan on the slots the prompt cares about (image failure). Failure
//! rates depend on the prompt, which gives the pretrained model a mix of
//! solved and weak prompts.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tokenizer::REGION_WORDS;
use super::{ToyImage, ToySpec, SLOTS};

/// Grid cell as (column, row), each in {-1, 0, 1}.
type Cell = (i32, i32);

pub fn region_word(cell: Cell) -> &'static str {
    let idx = (1 - cell.1) * 3 + (cell.0 + 1);
    REGION_WORDS[idx as usize]
}

pub fn word_region(word: &str) -> Option<Cell> {
    let idx = REGION_WORDS.iter().position(|&w| w == word)? as i32;
    Some((idx % 3 - 1, 1 - idx / 3))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Difficulty {
    Easy,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FailureRates {
    pub text: f64,
    pub image: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    /// Per-coordinate standard deviation around the planned cell center.
    pub jitter: f64,
    /// Standard deviation of the displacement applied to key slots on an image failure.
    pub failure_jitter: f64,
    pub easy: FailureRates,
    pub weak: FailureRates,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            jitter: 0.03,
            failure_jitter: 0.6,
            easy: FailureRates { text: 0.03, image: 0.03 },
            weak: FailureRates { text: 0.45, image: 0.4 },
        }
    }
}

/// Which prompts the teacher is unreliable on.
pub fn difficulty(spec: &ToySpec) -> Difficulty {
    let weak = match *spec {
        ToySpec::Cardinality { k } => (1..=3).contains(&k),
        ToySpec::RelativePositions { first, second, .. } => first.abs_diff(second) >= 2,
        ToySpec::ObjectOrientation { theta_deg, .. } => (theta_deg / 45.0).round() as i64 % 2 == 1,
        ToySpec::StructuralCharacteristics { epsilon } => epsilon <= 0.1,
        ToySpec::Text { center: (cx, cy) } => cx != 0.0 && cy != 0.0,
    };
    if weak {
        Difficulty::Weak
    } else {
        Difficulty::Easy
    }
}

/// Every toy prompt expressible in the toy vocabulary.
pub fn universe() -> Vec<ToySpec> {
    let mut out: Vec<ToySpec> = (0..=4).map(|k| ToySpec::Cardinality { k }).collect();
    for first in 0..SLOTS {
        for second in 0..SLOTS {
            if first != second {
                for margin in [0.1, 0.2, 0.3, 0.5] {
                    out.push(ToySpec::RelativePositions { first, second, margin });
                }
            }
        }
    }
    for i in 0..8 {
        for tau in [30.0, 45.0, 90.0] {
            out.push(ToySpec::ObjectOrientation { theta_deg: f64::from(i * 45), tau_deg: tau });
        }
    }
    for epsilon in [0.05, 0.1, 0.2] {
        out.push(ToySpec::StructuralCharacteristics { epsilon });
    }
    for cy in [-1.0, 0.0, 1.0] {
        for cx in [-1.0, 0.0, 1.0] {
            out.push(ToySpec::Text { center: (cx, cy) });
        }
    }
    out
}

fn random_cell<R: Rng + ?Sized>(rng: &mut R) -> Cell {
    (rng.random_range(-1..=1), rng.random_range(-1..=1))
}

fn in_grid(c: Cell) -> bool {
    c.0.abs() <= 1 && c.1.abs() <= 1
}

const DIRECTIONS: [Cell; 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

const LINES: [[Cell; 3]; 8] = [
    [(-1, -1), (0, -1), (1, -1)],
    [(-1, 0), (0, 0), (1, 0)],
    [(-1, 1), (0, 1), (1, 1)],
    [(-1, -1), (-1, 0), (-1, 1)],
    [(0, -1), (0, 0), (0, 1)],
    [(1, -1), (1, 0), (1, 1)],
    [(-1, -1), (0, 0), (1, 1)],
    [(-1, 1), (0, 0), (1, -1)],
];

/// Draws a plan; `correct = false` yields a plan that violates the prompt.
/// Returns the cells and the slots whose placement the prompt depends on.
fn plan<R: Rng + ?Sized>(spec: &ToySpec, correct: bool, rng: &mut R) -> ([Cell; SLOTS], Vec<usize>) {
    let mut cells = [(0, 0); SLOTS];
    for c in cells.iter_mut() {
        *c = random_cell(rng);
    }
    match *spec {
        ToySpec::Cardinality { k } => {
            let k = k as usize;
            let count = if correct {
                k
            } else if k == 0 {
                1
            } else if k == SLOTS {
                SLOTS - 1
            } else if rng.random_bool(0.5) {
                k - 1
            } else {
                k + 1
            };
            let mut order: Vec<usize> = (0..SLOTS).collect();
            order.shuffle(rng);
            for (rank, &slot) in order.iter().enumerate() {
                cells[slot].0 = if rank < count { 1 } else { -1 };
            }
            (cells, (0..SLOTS).collect())
        }
        ToySpec::RelativePositions { first, second, .. } => {
            let cols = [(-1, 0), (-1, 1), (0, 1)];
            let &(lo, hi) = cols.choose(rng).expect("non-empty");
            let (a, b) = if correct { (lo, hi) } else { (hi, lo) };
            cells[first].0 = a;
            cells[second].0 = b;
            (cells, vec![first, second])
        }
        ToySpec::ObjectOrientation { theta_deg, .. } => {
            let idx = ((theta_deg / 45.0).round() as usize) % 8;
            let idx = if correct {
                idx
            } else if rng.random_bool(0.5) {
                (idx + 1) % 8
            } else {
                (idx + 7) % 8
            };
            let dir = DIRECTIONS[idx];
            let starts: Vec<Cell> = (-1..=1)
                .flat_map(|x| (-1..=1).map(move |y| (x, y)))
                .filter(|&c| in_grid((c.0 + dir.0, c.1 + dir.1)))
                .collect();
            let &start = starts.choose(rng).expect("every direction fits the grid");
            cells[0] = start;
            cells[1] = (start.0 + dir.0, start.1 + dir.1);
            (cells, vec![0, 1])
        }
        ToySpec::StructuralCharacteristics { .. } => {
            // Every cell of the line is used, so any three slots still span it.
            let line = LINES.choose(rng).expect("non-empty");
            let mut on_line = [line[0], line[1], line[2], *line.choose(rng).expect("non-empty")];
            on_line.shuffle(rng);
            cells = on_line;
            if !correct {
                let slot = rng.random_range(0..SLOTS);
                let off: Vec<Cell> = (-1..=1)
                    .flat_map(|x| (-1..=1).map(move |y| (x, y)))
                    .filter(|c| !line.contains(c))
                    .collect();
                cells[slot] = *off.choose(rng).expect("a line never covers the grid");
            }
            (cells, (0..SLOTS).collect())
        }
        ToySpec::Text { center: (cx, cy) } => {
            let target = (cx.round() as i32, cy.round() as i32);
            cells[3] = if correct {
                target
            } else {
                let near: Vec<Cell> = DIRECTIONS
                    .iter()
                    .map(|d| (target.0 + d.0, target.1 + d.1))
                    .filter(|&c| in_grid(c))
                    .collect();
                *near.choose(rng).expect("every cell has a neighbor")
            };
            (cells, vec![3])
        }
    }
}

/// One teacher sample: reasoning words and the realized scene.
pub fn teacher_sample<R: Rng + ?Sized>(
    spec: &ToySpec,
    cfg: &TeacherConfig,
    rng: &mut R,
) -> (String, ToyImage) {
    let rates = match difficulty(spec) {
        Difficulty::Easy => cfg.easy,
        Difficulty::Weak => cfg.weak,
    };
    let text_ok = !rng.random_bool(rates.text);
    let image_ok = !rng.random_bool(rates.image);
    let (cells, key_slots) = plan(spec, text_ok, rng);
    let jitter = Normal::new(0.0, cfg.jitter).expect("finite jitter");
    let stray = Normal::new(0.0, cfg.failure_jitter).expect("finite jitter");
    let mut coords = [0f64; SLOTS * 2];
    for (slot, cell) in cells.iter().enumerate() {
        coords[2 * slot] = f64::from(cell.0) + jitter.sample(rng);
        coords[2 * slot + 1] = f64::from(cell.1) + jitter.sample(rng);
    }
    if !image_ok {
        let &slot = key_slots.choose(rng).expect("every family has key slots");
        coords[2 * slot] += stray.sample(rng);
        coords[2 * slot + 1] += stray.sample(rng);
    }
    let words: Vec<&str> = cells.iter().map(|&c| region_word(c)).collect();
    (words.join(" "), ToyImage::new(&coords).expect("finite coordinates"))
}
