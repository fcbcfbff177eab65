//! Finite-difference validation of the analytic adapter gradients.

use crate::autograd::Tape;
use crate::model::Model;
use crate::numerics::Rng;

use super::{cross_entropy, Sample, TrainError, IGNORE_TARGET};

/// Compare analytic gradients against central finite differences on at
/// least `min_params` randomly chosen adapter parameters. Dropout is
/// disabled so the loss is a deterministic function of the parameters.
/// Returns the maximum relative deviation observed.
pub fn gradcheck(
    model: &mut Model,
    sample: &Sample,
    eps: f64,
    min_params: usize,
    rng: &mut Rng,
) -> Result<f64, TrainError> {
    assert!(
        (1e-5..=1e-2).contains(&eps),
        "eps must lie in [1e-5, 1e-2]"
    );

    // Analytic gradients.
    let mut tape = Tape::new();
    let mut no_dropout = Rng::new(0);
    let (logits, leaves) =
        model.forward_on_tape(&mut tape, &sample.input, false, true, &mut no_dropout)?;
    let ce = tape.cross_entropy(logits, &sample.targets, IGNORE_TARGET);
    let grads = tape.backward(ce);

    // Enumerate every trainable coordinate, then sample.
    let mut coords: Vec<(String, usize)> = Vec::new();
    for (name, node) in &leaves {
        let g = grads[*node].as_ref().expect("trainable leaf gets gradient");
        for i in 0..g.numel() {
            coords.push((name.clone(), i));
        }
    }
    let picks = min_params.min(coords.len());
    rng.shuffle(&mut coords);
    coords.truncate(picks);

    let loss_at = |model: &Model| -> Result<f64, TrainError> {
        let logits = model.forward(&sample.input)?;
        cross_entropy(&logits, &sample.targets, IGNORE_TARGET)
    };

    let mut max_dev: f64 = 0.0;
    for (name, index) in coords {
        let node = leaves[&name];
        let analytic = grads[node].as_ref().expect("gradient").data()[index];
        let fd = {
            nudge(model, &name, index, eps);
            let plus = loss_at(model)?;
            nudge(model, &name, index, -2.0 * eps);
            let minus = loss_at(model)?;
            nudge(model, &name, index, eps); // restore
            (plus - minus) / (2.0 * eps)
        };
        let denom = analytic.abs().max(fd.abs()).max(1e-10);
        max_dev = max_dev.max((analytic - fd).abs() / denom);
    }
    Ok(max_dev)
}

fn nudge(model: &mut Model, tensor_name: &str, index: usize, delta: f64) {
    let (site, which) = tensor_name
        .rsplit_once(".lora_")
        .expect("adapter tensor name");
    let adapter = model
        .adapters_mut()
        .get_mut(site)
        .expect("adapter exists for sampled coordinate");
    let tensor = match which {
        "A" => &mut adapter.a,
        "B" => &mut adapter.b,
        other => panic!("unknown adapter tensor suffix {other}"),
    };
    tensor.data_mut()[index] += delta;
}
