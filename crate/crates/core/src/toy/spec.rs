use std::f64::consts::PI;
use std::fmt;

use super::{ToyError, ToyImage, SLOTS};
use crate::corpus::Category;

/// Half side length of the codeword box used by `TEXT` prompts.
pub const BOX_HALF_WIDTH: f64 = 0.1;
const BOX_FALLOFF: f64 = 0.02;

/// Parsed toy prompt. Angles are kept in degrees, as written.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToySpec {
    /// Exactly `k` points with `x > 0`.
    Cardinality { k: u8 },
    /// `x[first] < x[second] - margin`.
    RelativePositions { first: usize, second: usize, margin: f64 },
    /// Direction from slot 0 to slot 1 is `theta_deg`, within `tau_deg`.
    ObjectOrientation { theta_deg: f64, tau_deg: f64 },
    /// All points lie on one line, RMS orthogonal residual below `epsilon`.
    StructuralCharacteristics { epsilon: f64 },
    /// Slot 3 lies inside the 0.2 × 0.2 box centered at `center`.
    Text { center: (f64, f64) },
}

impl ToySpec {
    pub fn category(&self) -> Category {
        match self {
            ToySpec::Cardinality { .. } => Category::Cardinality,
            ToySpec::RelativePositions { .. } => Category::RelativePositions,
            ToySpec::ObjectOrientation { .. } => Category::ObjectOrientation,
            ToySpec::StructuralCharacteristics { .. } => Category::StructuralCharacteristics,
            ToySpec::Text { .. } => Category::Text,
        }
    }

    fn validate(&self) -> Result<(), ToyError> {
        let bad = |m: String| Err(ToyError::Range(m));
        match *self {
            ToySpec::Cardinality { k } if k as usize > SLOTS => bad(format!("k={k} not in 0..={SLOTS}")),
            ToySpec::RelativePositions { first, second, margin } => {
                if first >= SLOTS || second >= SLOTS || first == second {
                    bad(format!("pair=({first},{second}) must be two distinct slots below {SLOTS}"))
                } else if !(margin > 0.0 && margin <= 2.0) {
                    bad(format!("m={margin} not in (0, 2]"))
                } else {
                    Ok(())
                }
            }
            ToySpec::ObjectOrientation { theta_deg, tau_deg } => {
                if !(0.0..360.0).contains(&theta_deg) {
                    bad(format!("theta={theta_deg} not in [0, 360)"))
                } else if !(tau_deg > 0.0 && tau_deg <= 180.0) {
                    bad(format!("tau={tau_deg} not in (0, 180]"))
                } else {
                    Ok(())
                }
            }
            ToySpec::StructuralCharacteristics { epsilon } if !(epsilon > 0.0 && epsilon <= 2.0) => {
                bad(format!("eps={epsilon} not in (0, 2]"))
            }
            ToySpec::Text { center: (cx, cy) }
                if !(cx.abs() <= 1.9 && cy.abs() <= 1.9) =>
            {
                bad(format!("box=({cx},{cy}) center outside [-1.9, 1.9]"))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ToySpec {
    /// Canonical prompt text; `parse_toy_prompt` inverts it.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToySpec::Cardinality { k } => write!(f, "CARD k={k}"),
            ToySpec::RelativePositions { first, second, margin } => {
                write!(f, "RELPOS pair=({first},{second}) m={margin}")
            }
            ToySpec::ObjectOrientation { theta_deg, tau_deg } => {
                write!(f, "ORIENT theta={theta_deg} tau={tau_deg}")
            }
            ToySpec::StructuralCharacteristics { epsilon } => write!(f, "STRUCT eps={epsilon}"),
            ToySpec::Text { center: (cx, cy) } => write!(f, "TEXT box=({cx},{cy})"),
        }
    }
}

struct Cursor<'a> {
    words: Vec<(usize, &'a str)>,
    next: usize,
    end: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        let mut words = Vec::new();
        let mut start = None;
        for (i, ch) in text.char_indices() {
            match (ch.is_whitespace(), start) {
                (true, Some(s)) => {
                    words.push((s, &text[s..i]));
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            words.push((s, &text[s..]));
        }
        Self { words, next: 0, end: text.len() }
    }

    fn word(&mut self, what: &str) -> Result<(usize, &'a str), ToyError> {
        let w = self.words.get(self.next).copied().ok_or_else(|| ToyError::Parse {
            pos: self.end,
            msg: format!("expected {what}, found end of input"),
        })?;
        self.next += 1;
        Ok(w)
    }

    /// Consumes `key=<value>` and returns the value with its byte offset.
    fn field(&mut self, key: &str) -> Result<(usize, &'a str), ToyError> {
        let (pos, w) = self.word(&format!("`{key}=`"))?;
        match w.strip_prefix(key).and_then(|r| r.strip_prefix('=')) {
            Some(v) => Ok((pos + key.len() + 1, v)),
            None => Err(ToyError::Parse { pos, msg: format!("expected `{key}=`, found {w:?}") }),
        }
    }

    fn finish(&self) -> Result<(), ToyError> {
        match self.words.get(self.next) {
            Some(&(pos, w)) => Err(ToyError::Parse { pos, msg: format!("unexpected trailing {w:?}") }),
            None => Ok(()),
        }
    }
}

fn number<T: std::str::FromStr>((pos, v): (usize, &str)) -> Result<T, ToyError> {
    v.parse::<T>()
        .map_err(|_| ToyError::Parse { pos, msg: format!("invalid number {v:?}") })
}

fn finite((pos, v): (usize, &str)) -> Result<f64, ToyError> {
    let x: f64 = number((pos, v))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(ToyError::Parse { pos, msg: format!("non-finite number {v:?}") })
    }
}

fn pair((pos, v): (usize, &str)) -> Result<(usize, &str, usize, &str), ToyError> {
    let inner = v
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| ToyError::Parse { pos, msg: format!("expected `(a,b)`, found {v:?}") })?;
    let comma = inner
        .find(',')
        .ok_or_else(|| ToyError::Parse { pos, msg: format!("expected `(a,b)`, found {v:?}") })?;
    Ok((pos + 1, &inner[..comma], pos + 2 + comma, &inner[comma + 1..]))
}

/// Parses a toy prompt. Whitespace between words is free; the words are
/// fixed. Errors report the byte offset of the offending word.
pub fn parse_toy_prompt(text: &str) -> Result<ToySpec, ToyError> {
    let mut cur = Cursor::new(text);
    let (pos, head) = cur.word("category keyword")?;
    let spec = match head {
        "CARD" => ToySpec::Cardinality { k: number(cur.field("k")?)? },
        "RELPOS" => {
            let (pa, a, pb, b) = pair(cur.field("pair")?)?;
            let first = number((pa, a))?;
            let second = number((pb, b))?;
            let margin = finite(cur.field("m")?)?;
            ToySpec::RelativePositions { first, second, margin }
        }
        "ORIENT" => {
            let theta_deg = finite(cur.field("theta")?)?;
            let tau_deg = finite(cur.field("tau")?)?;
            ToySpec::ObjectOrientation { theta_deg, tau_deg }
        }
        "STRUCT" => ToySpec::StructuralCharacteristics { epsilon: finite(cur.field("eps")?)? },
        "TEXT" => {
            let (pa, a, pb, b) = pair(cur.field("box")?)?;
            ToySpec::Text { center: (finite((pa, a))?, finite((pb, b))?) }
        }
        other => {
            return Err(ToyError::Parse { pos, msg: format!("unknown category keyword {other:?}") })
        }
    };
    cur.finish()?;
    spec.validate()?;
    Ok(spec)
}

fn wrapped_angle_error(angle: f64, target: f64) -> f64 {
    let e = (angle - target).rem_euclid(2.0 * PI);
    e.min(2.0 * PI - e)
}

/// RMS orthogonal distance of the scene points to their total-least-squares line.
pub(crate) fn collinearity_residual(image: &ToyImage) -> f64 {
    let pts: Vec<(f64, f64)> = (0..SLOTS).map(|s| image.point(s)).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in &pts {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let half_trace = 0.5 * (sxx + syy);
    let lambda_min = half_trace - (0.25 * (sxx - syy).powi(2) + sxy * sxy).sqrt();
    (lambda_min.max(0.0) / n).sqrt()
}

/// Grades how well `image` satisfies `spec`, in `[0, 1]`.
pub fn oracle(spec: &ToySpec, image: &ToyImage) -> f64 {
    let score = match *spec {
        ToySpec::Cardinality { k } => {
            let count = (0..SLOTS).filter(|&s| image.point(s).0 > 0.0).count() as f64;
            1.0 - (count - f64::from(k)).abs() / SLOTS as f64
        }
        ToySpec::RelativePositions { first, second, margin } => {
            let (xi, xj) = (image.point(first).0, image.point(second).0);
            if xi < xj - margin {
                1.0
            } else {
                (1.0 - (xi - xj + margin)).max(0.0)
            }
        }
        ToySpec::ObjectOrientation { theta_deg, tau_deg } => {
            let (x0, y0) = image.point(0);
            let (x1, y1) = image.point(1);
            let err = wrapped_angle_error((y1 - y0).atan2(x1 - x0), theta_deg.to_radians());
            (1.0 - err / tau_deg.to_radians()).max(0.0)
        }
        ToySpec::StructuralCharacteristics { epsilon } => {
            (1.0 - collinearity_residual(image) / epsilon).max(0.0)
        }
        ToySpec::Text { center: (cx, cy) } => {
            let (x, y) = image.point(3);
            let dx = ((x - cx).abs() - BOX_HALF_WIDTH).max(0.0);
            let dy = ((y - cy).abs() - BOX_HALF_WIDTH).max(0.0);
            let d2 = dx * dx + dy * dy;
            if d2 == 0.0 {
                1.0
            } else {
                (-d2 / BOX_FALLOFF).exp()
            }
        }
    };
    score.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(points: [(f64, f64); 4]) -> ToyImage {
        ToyImage::from_points(points).unwrap()
    }

    #[test]
    fn parses_each_family() {
        assert_eq!(parse_toy_prompt("CARD k=2").unwrap(), ToySpec::Cardinality { k: 2 });
        assert_eq!(
            parse_toy_prompt("RELPOS pair=(0,1) m=0.1").unwrap(),
            ToySpec::RelativePositions { first: 0, second: 1, margin: 0.1 }
        );
        assert_eq!(
            parse_toy_prompt("ORIENT  theta=45 tau=30").unwrap(),
            ToySpec::ObjectOrientation { theta_deg: 45.0, tau_deg: 30.0 }
        );
        assert_eq!(
            parse_toy_prompt("STRUCT eps=0.1").unwrap(),
            ToySpec::StructuralCharacteristics { epsilon: 0.1 }
        );
        assert_eq!(
            parse_toy_prompt("TEXT box=(-1,0.5)").unwrap(),
            ToySpec::Text { center: (-1.0, 0.5) }
        );
    }

    #[test]
    fn canonical_text_round_trips() {
        for text in ["CARD k=0", "RELPOS pair=(2,3) m=0.3", "ORIENT theta=315 tau=45", "STRUCT eps=0.05", "TEXT box=(-1,1)"] {
            assert_eq!(parse_toy_prompt(text).unwrap().to_string(), text);
        }
    }

    #[test]
    fn range_and_grammar_errors() {
        assert!(matches!(parse_toy_prompt("CARD k=9"), Err(ToyError::Range(_))));
        assert!(matches!(parse_toy_prompt("RELPOS pair=(1,1) m=0.1"), Err(ToyError::Range(_))));
        assert!(matches!(parse_toy_prompt("ORIENT theta=0 tau=0"), Err(ToyError::Range(_))));
        assert_eq!(
            parse_toy_prompt("CARD q=2"),
            Err(ToyError::Parse { pos: 5, msg: "expected `k=`, found \"q=2\"".into() })
        );
        assert!(matches!(parse_toy_prompt("ZEBRA k=1"), Err(ToyError::Parse { pos: 0, .. })));
        assert!(matches!(parse_toy_prompt("CARD k=1 extra"), Err(ToyError::Parse { pos: 9, .. })));
        assert!(matches!(parse_toy_prompt("CARD"), Err(ToyError::Parse { pos: 4, .. })));
        assert!(matches!(parse_toy_prompt("STRUCT eps=NaN"), Err(ToyError::Parse { pos: 11, .. })));
        assert!(matches!(parse_toy_prompt("RELPOS pair=(0,x) m=0.1"), Err(ToyError::Parse { pos: 15, .. })));
    }

    #[test]
    fn cardinality_examples() {
        let spec = parse_toy_prompt("CARD k=2").unwrap();
        let exact = scene([(1.0, 0.0), (1.0, 0.0), (-1.0, 0.0), (-1.0, 0.0)]);
        assert_eq!(oracle(&spec, &exact), 1.0);
        let one_off = scene([(1.0, 0.0), (1.0, 0.0), (1.0, 0.0), (-1.0, 0.0)]);
        assert_eq!(oracle(&spec, &one_off), 0.75);
        let none = scene([(-1.0, 0.0); 4]);
        assert_eq!(oracle(&parse_toy_prompt("CARD k=4").unwrap(), &none), 0.0);
    }

    #[test]
    fn relative_position_examples() {
        let spec = parse_toy_prompt("RELPOS pair=(0,1) m=0.1").unwrap();
        let ok = scene([(-1.0, 0.0), (1.0, 0.0), (0.0, 0.0), (0.0, 0.0)]);
        assert_eq!(oracle(&spec, &ok), 1.0);
        let close = scene([(0.0, 0.0), (0.05, 0.0), (0.0, 0.0), (0.0, 0.0)]);
        assert!((oracle(&spec, &close) - (1.0 - (0.0 - 0.05 + 0.1))).abs() < 1e-7);
    }

    #[test]
    fn orientation_example() {
        let spec = parse_toy_prompt("ORIENT theta=0 tau=45").unwrap();
        let a = std::f64::consts::PI / 8.0;
        let img = scene([(0.0, 0.0), (a.cos(), a.sin()), (0.0, 0.0), (0.0, 0.0)]);
        assert!((oracle(&spec, &img) - 0.5).abs() < 1e-6);
        // wrap-around: 350 degrees is 10 away from 0
        let b = 350f64.to_radians();
        let img = scene([(0.0, 0.0), (b.cos(), b.sin()), (0.0, 0.0), (0.0, 0.0)]);
        assert!((oracle(&spec, &img) - (1.0 - 10.0 / 45.0)).abs() < 1e-5);
    }

    #[test]
    fn structural_and_text_examples() {
        let line = scene([(-1.0, -1.0), (0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]);
        let spec = parse_toy_prompt("STRUCT eps=0.1").unwrap();
        assert!((oracle(&spec, &line) - 1.0).abs() < 1e-6);
        let square = scene([(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)]);
        assert_eq!(oracle(&spec, &square), 0.0);

        let spec = parse_toy_prompt("TEXT box=(1,1)").unwrap();
        let inside = scene([(0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (1.05, 0.95)]);
        assert_eq!(oracle(&spec, &inside), 1.0);
        let outside = scene([(0.0, 0.0), (0.0, 0.0), (0.0, 0.0), (1.2, 1.0)]);
        let d = 1.2f32 as f64 - 1.0 - BOX_HALF_WIDTH;
        assert!((oracle(&spec, &outside) - (-d * d / 0.02).exp()).abs() < 1e-12);
    }

    #[test]
    fn relpos_slope_matches_finite_difference() {
        let spec = parse_toy_prompt("RELPOS pair=(0,1) m=0.2").unwrap();
        let h = 1e-3;
        let at = |x0: f64| oracle(&spec, &scene([(x0, 0.0), (0.0, 0.0), (0.0, 0.0), (0.0, 0.0)]));
        let slope = (at(0.3 + h) - at(0.3 - h)) / (2.0 * h);
        assert!((slope + 1.0).abs() < 1e-3, "slope {slope}");
    }
}
