//! Shared helpers for integration tests: parameter lookup by name and an
//! independent "plain forward" oracle for the CIFAR ResNet, composed
//! directly from the public ops rather than the network graph code.

#![allow(dead_code)]

use std::collections::HashMap;

use awm::net::Network;
use awm::ops::{self, BnStats};
use awm::{Tensor, Var};

pub struct NetHandles {
    pub params: HashMap<String, awm::Param>,
    pub bn: HashMap<String, BnStats>,
}

pub fn handles(net: &Network) -> NetHandles {
    let params = net.params().into_iter().map(|p| (p.name(), p)).collect();
    let bn = net.bn_buffers().into_iter().collect();
    NetHandles { params, bn }
}

impl NetHandles {
    pub fn var(&self, name: &str) -> Var {
        Var::param(self.params.get(name).unwrap_or_else(|| panic!("no param '{name}'")))
    }

    pub fn stats(&self, name: &str) -> &BnStats {
        self.bn.get(name).unwrap_or_else(|| panic!("no bn buffer '{name}'"))
    }

    fn bn_eval(&self, x: &Var, name: &str) -> Var {
        ops::batch_norm(
            x,
            &self.var(&format!("{name}.gamma")),
            &self.var(&format!("{name}.beta")),
            self.stats(name),
            false,
        )
        .unwrap()
    }
}

/// Eval-mode forward of a CIFAR ResNet re-composed block by block from
/// the named parameters, merging each residual branch as
/// `relu(w_f*F(x) + w_sc*x)` with the caller's fixed weights. With
/// w_f = w_sc = 0.5 this is the equal-weight oracle; with 1.0/1.0 it is
/// the plain residual network.
///
/// Returns (per-block outputs, logits).
pub fn manual_resnet_forward(
    net: &Network,
    batch: &Tensor,
    w_f: f64,
    w_sc: f64,
) -> (Vec<Tensor>, Tensor) {
    let cfg = net.config().clone();
    assert!(cfg.kind.is_resnet(), "manual forward covers the ResNet family only");
    let h = handles(net);
    let blocks_per_stage = (cfg.depth - 2) / 6;

    let x = Var::leaf(batch.clone());
    let stem = ops::conv2d(&x, &h.var("stem.conv.kernel"), 1, 1).unwrap();
    let mut y = ops::relu(&h.bn_eval(&stem, "stem.bn"));

    let mut outputs = Vec::new();
    for stage in 1..=3usize {
        for block in 0..blocks_per_stage {
            let name = format!("stage{stage}.block{block}");
            let stride = if stage > 1 && block == 0 { 2 } else { 1 };
            let c1 = ops::conv2d(&y, &h.var(&format!("{name}.conv1.kernel")), stride, 1).unwrap();
            let a1 = ops::relu(&h.bn_eval(&c1, &format!("{name}.bn1")));
            let c2 = ops::conv2d(&a1, &h.var(&format!("{name}.conv2.kernel")), 1, 1).unwrap();
            let f = h.bn_eval(&c2, &format!("{name}.bn2"));
            let sc = if stride == 1 {
                y.clone()
            } else if h.params.contains_key(&format!("{name}.shortcut.conv.kernel")) {
                let p = ops::conv2d(&y, &h.var(&format!("{name}.shortcut.conv.kernel")), stride, 0)
                    .unwrap();
                h.bn_eval(&p, &format!("{name}.shortcut.bn"))
            } else {
                ops::subsample_pad_channels(&y, stride, f.shape()[1]).unwrap()
            };
            let merged = ops::add(&ops::scale(&f, w_f), &ops::scale(&sc, w_sc)).unwrap();
            y = ops::relu(&merged);
            outputs.push(y.value().clone());
        }
    }
    let pooled = ops::global_avg_pool(&y).unwrap();
    let logits =
        ops::fully_connected(&pooled, &h.var("classifier.weight"), &h.var("classifier.bias"))
            .unwrap();
    (outputs, logits.value().clone())
}

pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
