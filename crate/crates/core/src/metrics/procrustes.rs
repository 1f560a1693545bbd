use nalgebra::{Matrix3, Vector3};

/// Result of aligning one frame.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub aligned: Vec<[f64; 3]>,
    /// True when either point set had no spread and only translation was
    /// applied.
    pub degenerate: bool,
}

const DEGENERATE_NORM: f64 = 1e-12;

fn centroid(p: &[[f64; 3]]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for q in p {
        c += Vector3::from(*q);
    }
    c / p.len() as f64
}

/// Similarity transform (rotation, uniform scale, translation) of `pred`
/// minimizing the squared distance to `gt`. Reflections are excluded.
pub fn align(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Alignment {
    assert_eq!(pred.len(), gt.len(), "point sets differ in size");
    let (mp, mg) = (centroid(pred), centroid(gt));
    let p0: Vec<Vector3<f64>> = pred.iter().map(|q| Vector3::from(*q) - mp).collect();
    let g0: Vec<Vector3<f64>> = gt.iter().map(|q| Vector3::from(*q) - mg).collect();
    let np = p0.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
    let ng = g0.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
    if np < DEGENERATE_NORM || ng < DEGENERATE_NORM {
        return Alignment {
            aligned: p0.iter().map(|v| (v + mg).into()).collect(),
            degenerate: true,
        };
    }
    // cross-covariance of the normalized sets; rows are points
    let mut h = Matrix3::zeros();
    for (a, b) in p0.iter().zip(&g0) {
        h += (a / np) * (b / ng).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut s = svd.singular_values;
    let mut v = v_t.transpose();
    // rotation acting on column vectors: x -> r x
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        let k = (0..3).min_by(|&i, &j| s[i].total_cmp(&s[j])).expect("three values");
        v.column_mut(k).neg_mut();
        s[k] = -s[k];
        r = v * u.transpose();
    }
    let scale = s.sum() * ng / np;
    Alignment {
        aligned: p0.iter().map(|q| (scale * (r * q) + mg).into()).collect(),
        degenerate: false,
    }
}
