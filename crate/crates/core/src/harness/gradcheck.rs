//! Central finite-difference check of the training-loss gradient.

use rand::Rng;

use crate::config::Config;
use crate::error::Result;
use crate::nn::{reconstruction_loss, record_reconstruction_loss, SirModel, StudentDecoder, TeacherFeatures};
use crate::rng;
use crate::tensor::{Tape, Tensor};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so that entries whose true
/// gradient is near zero are judged by absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub loops: usize,
    pub loss: f64,
    pub student: Vec<ParamCheck>,
    pub max_rel_error: f64,
    /// `(name, largest analytic gradient magnitude)` for every teacher tensor.
    pub teacher: Vec<(String, f64)>,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Analytic loss and gradients with the teacher recorded on the same tape
/// as frozen leaves, so its (absent) gradients can be reported too.
fn analytic(model: &SirModel, x: &Tensor) -> Result<(f64, Vec<Tensor>, Vec<(String, f64)>)> {
    let mut tape = Tape::new();
    let mut h = tape.constant(x.clone());
    let mut teacher_vars = Vec::new();
    let mut taps = Vec::new();
    for stage in &model.teacher.stages {
        let w = tape.leaf(stage.weight.clone().with_grad(false));
        let b = tape.leaf(stage.bias.clone().with_grad(false));
        teacher_vars.push(w);
        teacher_vars.push(b);
        let z = stage.record(&mut tape, h, (w, b))?;
        h = tape.leaky_relu(z, model.teacher.slope);
        taps.push(h);
    }
    let (f3_t, phi_t) = (taps[2], taps[3]);
    // Targets enter the loss as constants.
    let f3_c = tape.constant(tape.value(f3_t).clone());
    let phi_c = tape.constant(tape.value(phi_t).clone());
    let params = model.student.record_parameters(&mut tape, true);
    let outs = model.student.record_loops(&mut tape, &params, phi_c, model.loops)?;
    let loss = record_reconstruction_loss(&mut tape, f3_c, phi_c, &outs, model.epsilon)?;
    let grads = tape.backward(loss)?;
    let student = params
        .iter()
        .map(|&p| grads.get(p).expect("student gradient").clone())
        .collect();
    let teacher = model
        .teacher
        .named_parameters()
        .into_iter()
        .zip(&teacher_vars)
        .map(|((name, _), &v)| {
            let g = grads.get(v).map_or(0.0, |g| g.data().iter().fold(0.0, |m: f64, x| m.max(x.abs())));
            (name, g)
        })
        .collect();
    Ok((tape.value(loss).data()[0], student, teacher))
}

fn loss_at(model: &SirModel, teacher: &TeacherFeatures) -> Result<f64> {
    reconstruction_loss(teacher, &model.loop_forward(&teacher.phi)?, model.epsilon)
}

/// Compares every analytic student gradient entry against a central
/// difference on a seeded random batch.
pub fn grad_check(cfg: &Config) -> Result<GradCheckReport> {
    grad_check_with_step(cfg, FD_STEP)
}

/// [`grad_check`] with an explicit finite-difference step.
pub fn grad_check_with_step(cfg: &Config, h: f64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut model = SirModel::new(cfg, rng::STUDENT);
    let mut r = rng::stream(cfg.seed, rng::BATCH);
    let s = cfg.image_size;
    let x = Tensor::from_fn([cfg.batch_size, cfg.channels, s, s], |_, _, _, _| r.random::<f64>());
    let (loss, analytic_grads, teacher) = analytic(&model, &x)?;
    let features = model.teacher_forward(&x)?;

    let names = StudentDecoder::parameter_names();
    let mut student = Vec::with_capacity(names.len());
    for (pi, name) in names.iter().enumerate() {
        let n = analytic_grads[pi].numel();
        let mut check = ParamCheck {
            name: name.clone(),
            entries: n,
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            max_abs_grad: 0.0,
        };
        for i in 0..n {
            let orig = model.student.parameters()[pi].data()[i];
            model.student.parameters_mut()[pi].data_mut()[i] = orig + h;
            let up = loss_at(&model, &features)?;
            model.student.parameters_mut()[pi].data_mut()[i] = orig - h;
            let down = loss_at(&model, &features)?;
            model.student.parameters_mut()[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic_grads[pi].data()[i];
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_rel_error = check.max_rel_error.max(rel_error(a, numeric));
            check.max_abs_grad = check.max_abs_grad.max(a.abs());
        }
        student.push(check);
    }
    let max_rel_error = student.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        loops: cfg.loops,
        loss,
        student,
        max_rel_error,
        teacher,
    })
}
