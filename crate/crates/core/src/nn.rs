//! Teacher encoder, up-then-down student decoder and the multi-loop
//! reconstruction objective.
//!
//! The student consumes the teacher's most compressed map `φᵗ`, upsamples it
//! to a mid-level map `f₃ˢ` and strides back down to `φˢ`. Loop `k > 1` is fed
//! the student's own `φˢ` from loop `k − 1`, not the teacher feature: feeding
//! `φᵗ` every time would make all loops produce the same output. The whole
//! recurrence is recorded on one tape, so gradients flow through every loop.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::Config;
use crate::error::{Result, SirError};
use crate::rng;
use crate::tensor::{self, Gradients, Tape, Tensor, Var};

/// One convolution (or transposed convolution) with its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvLayer {
    fn he_init(
        rng: &mut impl Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        transposed: bool,
    ) -> Self {
        let (shape, fan_in) = if transposed {
            ([c_in, c_out, kernel, kernel], c_in * kernel * kernel / (stride * stride))
        } else {
            ([c_out, c_in, kernel, kernel], c_in * kernel * kernel)
        };
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let weight = Tensor::from_fn(shape, |_, _, _, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        ConvLayer {
            weight,
            bias: Tensor::zeros([1, c_out, 1, 1]),
            stride,
            padding,
            transposed,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.transposed {
            tensor::conv_transpose2d(x, &self.weight, &self.bias, self.stride, self.padding)
        } else {
            tensor::conv2d(x, &self.weight, &self.bias, self.stride, self.padding)
        }
    }

    pub(crate) fn record(&self, tape: &mut Tape, x: Var, params: (Var, Var)) -> Result<Var> {
        let (w, b) = params;
        if self.transposed {
            tape.conv_transpose2d(x, w, b, self.stride, self.padding)
        } else {
            tape.conv2d(x, w, b, self.stride, self.padding)
        }
    }
}

/// Teacher outputs for a batch: the mid-level map after stage three and the
/// compressed map after stage four.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatures {
    pub f3: Tensor,
    pub phi: Tensor,
}

impl TeacherFeatures {
    pub fn batch_item(&self, i: usize) -> TeacherFeatures {
        TeacherFeatures {
            f3: self.f3.batch_item(i),
            phi: self.phi.batch_item(i),
        }
    }

    pub fn stack(items: &[&TeacherFeatures]) -> Result<TeacherFeatures> {
        let f3: Vec<&Tensor> = items.iter().map(|t| &t.f3).collect();
        let phi: Vec<&Tensor> = items.iter().map(|t| &t.phi).collect();
        Ok(TeacherFeatures {
            f3: Tensor::stack(&f3)?,
            phi: Tensor::stack(&phi)?,
        })
    }
}

/// Four stride-2 conv stages with leaky-ReLU, never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherEncoder {
    pub stages: [ConvLayer; 4],
    pub slope: f64,
}

impl TeacherEncoder {
    pub fn new(in_channels: usize, channels: [usize; 4], slope: f64, rng: &mut impl Rng) -> Self {
        let mut c_in = in_channels;
        let stages = channels.map(|c_out| {
            let mut layer = ConvLayer::he_init(rng, c_in, c_out, 3, 2, 1, false);
            layer.bias = Tensor::from_fn([1, c_out, 1, 1], |_, _, _, _| rng.random_range(-0.05..0.05));
            c_in = c_out;
            layer
        });
        TeacherEncoder { stages, slope }
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<TeacherFeatures> {
        let [_, c, h, w] = x.shape();
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(SirError::shape(
                "teacher_forward",
                format!("spatial extent {h}×{w} is not a positive multiple of 16"),
            ));
        }
        if c != self.in_channels() {
            return Err(SirError::shape(
                "teacher_forward",
                format!("teacher expects {} input channels, got {c}", self.in_channels()),
            ));
        }
        let mut feats = Vec::with_capacity(4);
        let mut cur = x.clone().with_grad(false);
        for stage in &self.stages {
            cur = tensor::leaky_relu(&stage.forward(&cur)?, self.slope);
            feats.push(cur.clone());
        }
        let phi = feats.pop().expect("four stages");
        let f3 = feats.pop().expect("four stages");
        Ok(TeacherFeatures { f3, phi })
    }

    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("teacher.stage{}.weight", i + 1), &s.weight));
            out.push((format!("teacher.stage{}.bias", i + 1), &s.bias));
        }
        out
    }

    pub fn named_parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter_mut().enumerate() {
            out.push((format!("teacher.stage{}.weight", i + 1), &mut s.weight));
            out.push((format!("teacher.stage{}.bias", i + 1), &mut s.bias));
        }
        out
    }
}

/// Trainable decoder: up (transposed conv + refine) to the mid level, then
/// down (strided conv + refine) to the compressed level.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentDecoder {
    pub up: ConvLayer,
    pub up_refine: ConvLayer,
    pub down: ConvLayer,
    pub down_refine: ConvLayer,
    pub slope: f64,
}

const STUDENT_LAYERS: [&str; 4] = ["up", "up_refine", "down", "down_refine"];

/// Student outputs of one loop.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutput {
    pub f3: Tensor,
    pub phi: Tensor,
}

/// Tape handles for one loop.
#[derive(Debug, Clone, Copy)]
pub struct LoopVars {
    pub f3: Var,
    pub phi: Var,
}

impl StudentDecoder {
    pub fn new(mid_channels: usize, top_channels: usize, slope: f64, rng: &mut impl Rng) -> Self {
        let (c3, c4) = (mid_channels, top_channels);
        let mut layer = |c_in, c_out, kernel, stride, transposed| {
            ConvLayer::he_init(rng, c_in, c_out, kernel, stride, 1, transposed)
        };
        let up = layer(c4, c3, 4, 2, true);
        let up_refine = layer(c3, c3, 3, 1, false);
        let down = layer(c3, c4, 3, 2, false);
        let down_refine = layer(c4, c4, 3, 1, false);
        let mut student = StudentDecoder {
            up,
            up_refine,
            down,
            down_refine,
            slope,
        };
        for p in student.parameters_mut() {
            p.set_requires_grad(true);
        }
        student
    }

    fn layers(&self) -> [&ConvLayer; 4] {
        [&self.up, &self.up_refine, &self.down, &self.down_refine]
    }

    fn layers_mut(&mut self) -> [&mut ConvLayer; 4] {
        [&mut self.up, &mut self.up_refine, &mut self.down, &mut self.down_refine]
    }

    /// Weights and biases in a fixed order: `up`, `up_refine`, `down`, `down_refine`.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers().into_iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_names() -> Vec<String> {
        STUDENT_LAYERS
            .iter()
            .flat_map(|l| [format!("student.{l}.weight"), format!("student.{l}.bias")])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    /// Records the parameters on `tape`; they receive gradients iff `trainable`.
    pub fn record_parameters(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.parameters()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone().with_grad(true))
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// One up-then-down pass from a compressed map.
    pub fn record_pass(&self, tape: &mut Tape, params: &[Var], input: Var) -> Result<LoopVars> {
        let p = |i: usize| (params[2 * i], params[2 * i + 1]);
        let h = self.up.record(tape, input, p(0))?;
        let h = tape.leaky_relu(h, self.slope);
        let f3 = self.up_refine.record(tape, h, p(1))?;
        let d = self.down.record(tape, f3, p(2))?;
        let d = tape.leaky_relu(d, self.slope);
        let phi = self.down_refine.record(tape, d, p(3))?;
        Ok(LoopVars { f3, phi })
    }

    /// Runs `loops` passes, feeding each pass's compressed output to the next.
    pub fn record_loops(&self, tape: &mut Tape, params: &[Var], phi_t: Var, loops: usize) -> Result<Vec<LoopVars>> {
        let expected = self.up.weight.shape()[0];
        let got = tape.value(phi_t).shape()[1];
        if got != expected {
            return Err(SirError::shape(
                "loop_forward",
                format!("decoder expects {expected} input channels, got {got}"),
            ));
        }
        let mut outputs = Vec::with_capacity(loops);
        let mut input = phi_t;
        for _ in 0..loops {
            let out = self.record_pass(tape, params, input)?;
            input = out.phi;
            outputs.push(out);
        }
        Ok(outputs)
    }
}

/// Adds every per-loop, per-level loss term on the tape.
///
/// Each term is the mean over batch and space of the channel-wise cosine
/// distance map; terms are summed over levels and loops.
pub fn record_reconstruction_loss(
    tape: &mut Tape,
    f3_t: Var,
    phi_t: Var,
    outputs: &[LoopVars],
    eps: f64,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for out in outputs {
        for (student, target) in [(out.f3, f3_t), (out.phi, phi_t)] {
            let map = tape.cosine_distance_map(student, target, eps)?;
            let term = tape.mean_all(map)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| SirError::invalid("training_loss", "at least one loop is required"))
}

/// Loss for externally supplied student outputs, e.g. to probe the objective
/// at a known fixed point.
pub fn reconstruction_loss(teacher: &TeacherFeatures, outputs: &[LoopOutput], eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let f3_t = tape.constant(teacher.f3.clone());
    let phi_t = tape.constant(teacher.phi.clone());
    let vars: Vec<LoopVars> = outputs
        .iter()
        .map(|o| LoopVars {
            f3: tape.constant(o.f3.clone()),
            phi: tape.constant(o.phi.clone()),
        })
        .collect();
    let loss = record_reconstruction_loss(&mut tape, f3_t, phi_t, &vars, eps)?;
    Ok(tape.value(loss).data()[0])
}

/// Teacher, student and loop count.
#[derive(Debug, Clone, PartialEq)]
pub struct SirModel {
    pub teacher: TeacherEncoder,
    pub student: StudentDecoder,
    pub loops: usize,
    pub epsilon: f64,
}

/// Loss value and per-parameter student gradients for one batch.
#[derive(Debug)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

impl SirModel {
    /// Builds a model with seeded teacher and student weights.
    ///
    /// `student_stream` selects the random stream for the student so that
    /// several models sharing one seed can get distinct decoders.
    pub fn new(cfg: &Config, student_stream: u64) -> Self {
        let mut trng = rng::stream(cfg.seed, rng::TEACHER);
        let teacher = TeacherEncoder::new(cfg.channels, cfg.teacher_channels, cfg.leaky_slope, &mut trng);
        let mut srng = rng::stream(cfg.seed, student_stream);
        let student = StudentDecoder::new(
            cfg.teacher_channels[2],
            cfg.teacher_channels[3],
            cfg.leaky_slope,
            &mut srng,
        );
        SirModel {
            teacher,
            student,
            loops: cfg.loops,
            epsilon: cfg.epsilon_cos,
        }
    }

    pub fn teacher_forward(&self, x: &Tensor) -> Result<TeacherFeatures> {
        self.teacher.forward(x)
    }

    /// Student outputs of every loop for a given compressed teacher map.
    pub fn loop_forward(&self, phi_t: &Tensor) -> Result<Vec<LoopOutput>> {
        let mut tape = Tape::new();
        let params = self.student.record_parameters(&mut tape, false);
        let input = tape.constant(phi_t.clone());
        let vars = self.student.record_loops(&mut tape, &params, input, self.loops)?;
        Ok(vars
            .into_iter()
            .map(|v| LoopOutput {
                f3: tape.value(v.f3).clone(),
                phi: tape.value(v.phi).clone(),
            })
            .collect())
    }

    /// The summed multi-loop objective on a batch of images.
    pub fn training_loss(&self, x: &Tensor) -> Result<f64> {
        let teacher = self.teacher_forward(x)?;
        Ok(self.loss_and_grads(&teacher)?.loss)
    }

    /// Forward and backward pass against precomputed teacher targets.
    pub fn loss_and_grads(&self, teacher: &TeacherFeatures) -> Result<LossAndGrads> {
        let mut tape = Tape::new();
        let params = self.student.record_parameters(&mut tape, true);
        let f3_t = tape.constant(teacher.f3.clone());
        let phi_t = tape.constant(teacher.phi.clone());
        let outputs = self.student.record_loops(&mut tape, &params, phi_t, self.loops)?;
        let loss = record_reconstruction_loss(&mut tape, f3_t, phi_t, &outputs, self.epsilon)?;
        let mut grads: Gradients = tape.backward(loss)?;
        let grads = params
            .iter()
            .map(|&p| grads.take(p).expect("trainable parameter has a gradient"))
            .collect();
        Ok(LossAndGrads {
            loss: tape.value(loss).data()[0],
            grads,
        })
    }
}
