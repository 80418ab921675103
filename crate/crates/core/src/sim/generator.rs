use serde::{Deserialize, Serialize};

/// Piecewise-linear function of scenario time (seconds since start).
///
/// Either a constant or a list of `[t, value]` knots; values are linearly
/// interpolated between knots and held constant outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Piecewise {
    Constant(f64),
    Knots(Vec<(f64, f64)>),
}

impl Default for Piecewise {
    fn default() -> Self {
        Piecewise::Constant(0.0)
    }
}

impl Piecewise {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            Piecewise::Constant(v) => *v,
            Piecewise::Knots(knots) => {
                let Some(first) = knots.first() else {
                    return 0.0;
                };
                if t <= first.0 {
                    return first.1;
                }
                for w in knots.windows(2) {
                    let ((t0, v0), (t1, v1)) = (w[0], w[1]);
                    if t <= t1 {
                        if t1 == t0 {
                            return v1;
                        }
                        return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
                    }
                }
                knots.last().map(|k| k.1).unwrap_or(0.0)
            }
        }
    }

    pub fn is_sorted(&self) -> bool {
        match self {
            Piecewise::Constant(_) => true,
            Piecewise::Knots(k) => k.windows(2).all(|w| w[0].0 <= w[1].0),
        }
    }
}
