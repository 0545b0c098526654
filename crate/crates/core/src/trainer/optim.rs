use crate::model::{NetParams, Real};

/// Global L2 norm over every gradient tensor.
pub fn grad_norm<R: Real>(grads: &NetParams<R>) -> f64 {
    grads
        .named()
        .iter()
        .flat_map(|(_, t)| t.iter().map(|v| v.as_f64() * v.as_f64()).collect::<Vec<_>>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<R: Real>(grads: &mut NetParams<R>, max_norm: f64) -> f64 {
    let n = grad_norm(grads);
    if max_norm > 0.0 && n > max_norm {
        let s = R::lit(max_norm / n);
        for (_, mut t) in grads.named_mut() {
            t.mapv_inplace(|v| v * s);
        }
    }
    n
}

/// One SGD step with momentum and L2 weight decay:
/// `g += wd * p; v = mu * v + g; p -= lr * v`.
pub fn sgd_step<R: Real>(
    params: &mut NetParams<R>,
    velocity: &mut NetParams<R>,
    grads: &NetParams<R>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let (lr, mu, wd) = (R::lit(lr), R::lit(momentum), R::lit(weight_decay));
    let p_all = params.named_mut();
    let v_all = velocity.named_mut();
    let g_all = grads.named();
    for (((_, mut p), (_, mut v)), (_, g)) in p_all.into_iter().zip(v_all).zip(g_all) {
        ndarray::Zip::from(&mut p)
            .and(&mut v)
            .and(&g)
            .for_each(|p, v, &g| {
                let g = g + wd * *p;
                *v = mu * *v + g;
                *p -= lr * *v;
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn sgd_matches_hand_update() {
        let cfg = ModelConfig::desk();
        let mut p = NetParams::<f64>::init(&cfg, 0);
        let start = p.clone();
        let mut v = p.zeros_like();
        let mut g = p.zeros_like();
        g.cls.bias[1] = 2.0;
        sgd_step(&mut p, &mut v, &g, 0.1, 0.9, 0.0);
        assert!((p.cls.bias[1] - (start.cls.bias[1] - 0.2)).abs() < 1e-12);
        sgd_step(&mut p, &mut v, &g, 0.1, 0.9, 0.0);
        // v = 0.9 * 2 + 2 = 3.8
        assert!((p.cls.bias[1] - (start.cls.bias[1] - 0.2 - 0.38)).abs() < 1e-12);
        assert_eq!(p.cls.bias[0], start.cls.bias[0]);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let cfg = ModelConfig::desk();
        let mut g = NetParams::<f64>::init(&cfg, 1).zeros_like();
        g.reg.bias[0] = 3.0;
        g.reg.bias[1] = 4.0;
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((grad_norm(&g) - 1.0).abs() < 1e-12);
    }
}
