//! Micro ELBO instance and its adjoint-vs-finite-difference comparison.

use df2m::data::FunctionalPanel;
use df2m::model::{Df2mModel, ModelConfig, Phase, PARAM_NAMES};
use df2m::rng::{stream, Stream};
use df2m::seqnets::EncoderKind;
use nalgebra::DMatrix;

use super::{finite_diff, grad_mismatch, random_matrix};

pub fn micro_panel(seed: u64) -> FunctionalPanel {
    let values = (0..3).map(|t| random_matrix(2, 3, seed + t)).collect();
    FunctionalPanel::from_values(values, vec![0.0, 0.4, 1.0]).unwrap()
}

pub fn micro_model(kind: EncoderKind, panel: &FunctionalPanel) -> Df2mModel {
    let config = ModelConfig {
        factors: 2,
        inducing: 2,
        hidden_size: 3,
        encoder: kind,
        mc_draws: 4,
        seed: 11,
        ..ModelConfig::default()
    };
    let mut model = Df2mModel::init(panel, config).unwrap();
    // move away from the symmetric initial point
    let shapes: Vec<(usize, usize)> = model.params.iter().map(|p| p.value.shape()).collect();
    for (i, (r, c)) in shapes.into_iter().enumerate() {
        let bump = random_matrix(r, c, 100 + i as u64) * 0.1;
        model.params[i].value += bump;
    }
    model
}

pub fn all_values(model: &Df2mModel) -> Vec<DMatrix<f64>> {
    model
        .params
        .iter()
        .map(|p| p.value.clone())
        .chain(model.encoder_group().map(|t| t.value.clone()))
        .collect()
}

pub fn with_values(model: &Df2mModel, values: &[DMatrix<f64>]) -> Df2mModel {
    let mut m = model.clone();
    let np = m.params.len();
    for (i, v) in values.iter().enumerate() {
        if i < np {
            m.params[i].value = v.clone();
        }
    }
    for (x, v) in m.encoder_group_mut().zip(&values[np..]) {
        x.value = v.clone();
    }
    m
}

/// `(tensor, relative, absolute)` mismatch of every ELBO adjoint on the
/// micro instance (n=3, p=2, M=2, K=2, L=3).
pub fn gradient_mismatches(kind: EncoderKind) -> Vec<(String, f64, f64)> {
    let panel = micro_panel(7);
    let model = micro_model(kind, &panel);
    let noise = model.sample_noise(&mut stream(5, Stream::Training));
    let inputs = Df2mModel::encoder_inputs(&model.mu_history(), false);
    let graph = model.elbo_graph_at(&panel, &noise, Phase::Joint, &inputs).unwrap();
    let leaves: Vec<_> = graph.variational.iter().chain(&graph.encoder).copied().collect();
    let grads = graph.tape.backward(graph.elbo, &leaves).unwrap();

    let values = all_values(&model);
    let fd = finite_diff(&values, 1e-6, |v| {
        with_values(&model, v)
            .elbo_graph_at(&panel, &noise, Phase::Joint, &inputs)
            .unwrap()
            .terms
            .elbo
    });
    let names = PARAM_NAMES
        .iter()
        .map(|s| s.to_string())
        .chain(model.encoder_group().map(|t| t.name.clone()));
    names
        .zip(&leaves)
        .zip(&fd)
        .map(|((name, leaf), g)| {
            let (rel, abs) = grad_mismatch(grads.get(*leaf).unwrap(), g, 1e-6);
            (name, rel, abs)
        })
        .collect()
}
