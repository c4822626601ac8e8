//! Building blocks: plain double-conv, squeeze-excitation, the two-branch
//! local/global block, its SE-gated variant, and the four-branch dilated
//! separable pyramid. Each block knows how to declare its parameters and
//! how to run forward through a [`Session`].

use crate::error::{bail_spec, Error, Result};
use crate::ops::ConvSpec;
use crate::params::ParamSet;
use crate::tape::{Tape, Value, ValueId};
use crate::tensor::{dims, Dims, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Dilation rates of the pyramid branches.
pub const PS_DILATIONS: [usize; 4] = [1, 6, 12, 18];

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

/// Fills a parameter store from declarations, drawing every random weight
/// from `rng` in declaration order so a seed fixes the whole set.
pub fn materialize_decls<T: Scalar>(
    decls: &[ParamDecl],
    params: &mut ParamSet<T>,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    use rand::Rng;
    for d in decls {
        let tensor = match d.init {
            Init::HeUniform { fan_in } => {
                if fan_in == 0 {
                    return Err(Error::Config(format!(
                        "parameter {:?} declared with zero fan-in",
                        d.name
                    )));
                }
                let bound = (6.0 / fan_in as f64).sqrt();
                let data: Vec<T> = (0..d.dims.count())
                    .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(d.dims, data)?
            }
            Init::Zeros => Tensor::zeros(d.dims),
            Init::Ones => Tensor::filled(d.dims, T::ONE),
        };
        params.insert(&d.name, tensor, d.learnable)?;
    }
    Ok(())
}

/// Execution context for one forward pass: the tape, the parameter store,
/// and the mode. Binding a parameter registers it as a tape leaf and
/// remembers the (parameter index, leaf id) pair so the training loop can
/// route gradients back by name.
pub struct Session<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a mut ParamSet<T>,
    mode: Mode,
    bound: Vec<(usize, ValueId)>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(params: &'a mut ParamSet<T>, mode: Mode, recording: bool) -> Session<'a, T> {
        Session {
            tape: Tape::new(recording),
            params,
            mode,
            bound: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Registers the named parameter as a differentiable leaf on the tape.
    pub fn bind(&mut self, name: &str) -> Result<Value<T>> {
        let idx = self.params.index_of(name)?;
        let value = self.tape.leaf(self.params.at(idx).tensor.clone());
        self.bound.push((idx, value.id()));
        Ok(value)
    }

    /// Reads non-learnable state (running statistics) by name.
    pub fn state(&self, name: &str) -> Result<Tensor<T>> {
        Ok(self.params.get(name)?.clone())
    }

    pub fn set_state(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        self.params.set(name, tensor)
    }

    /// Parameters bound so far, as (parameter index, tape leaf) pairs in
    /// binding order.
    pub fn bound(&self) -> &[(usize, ValueId)] {
        &self.bound
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.params
    }
}

/// How a parameter tensor is filled at initialization.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Init {
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct ParamDecl {
    pub name: String,
    pub dims: Dims,
    pub init: Init,
    pub learnable: bool,
}

impl ParamDecl {
    fn new(name: String, dims: Dims, init: Init, learnable: bool) -> ParamDecl {
        ParamDecl {
            name,
            dims,
            init,
            learnable,
        }
    }
}

fn decl_conv(out: &mut Vec<ParamDecl>, path: &str, spec: &ConvSpec) {
    let fan_in = (spec.in_channels / spec.groups) * spec.kernel.0 * spec.kernel.1;
    out.push(ParamDecl::new(
        format!("{path}.w"),
        spec.weight_dims(),
        Init::HeUniform { fan_in },
        true,
    ));
    if spec.bias {
        out.push(ParamDecl::new(
            format!("{path}.b"),
            spec.bias_dims(),
            Init::Zeros,
            true,
        ));
    }
}

fn decl_bn(out: &mut Vec<ParamDecl>, path: &str, channels: usize) {
    let d = dims(1, channels, 1, 1);
    out.push(ParamDecl::new(format!("{path}.gamma"), d, Init::Ones, true));
    out.push(ParamDecl::new(format!("{path}.beta"), d, Init::Zeros, true));
    out.push(ParamDecl::new(
        format!("{path}.running_mean"),
        d,
        Init::Zeros,
        false,
    ));
    out.push(ParamDecl::new(
        format!("{path}.running_var"),
        d,
        Init::Ones,
        false,
    ));
}

fn decl_linear(out: &mut Vec<ParamDecl>, path: &str, in_features: usize, out_features: usize) {
    out.push(ParamDecl::new(
        format!("{path}.w"),
        dims(out_features, in_features, 1, 1),
        Init::HeUniform { fan_in: in_features },
        true,
    ));
    out.push(ParamDecl::new(
        format!("{path}.b"),
        dims(1, out_features, 1, 1),
        Init::Zeros,
        true,
    ));
}

fn batchnorm<T: Scalar>(sess: &mut Session<T>, path: &str, x: &Value<T>) -> Result<Value<T>> {
    let gamma = sess.bind(&format!("{path}.gamma"))?;
    let beta = sess.bind(&format!("{path}.beta"))?;
    let rm_name = format!("{path}.running_mean");
    let rv_name = format!("{path}.running_var");
    let rm = sess.state(&rm_name)?;
    let rv = sess.state(&rv_name)?;
    let eps = T::from_f64(BN_EPS);
    match sess.mode {
        Mode::Train => {
            let momentum = T::from_f64(BN_MOMENTUM);
            let (y, new_rm, new_rv) =
                sess.tape
                    .batchnorm2d_train(x, &gamma, &beta, &rm, &rv, eps, momentum)?;
            sess.set_state(&rm_name, new_rm)?;
            sess.set_state(&rv_name, new_rv)?;
            Ok(y)
        }
        Mode::Eval => sess.tape.batchnorm2d_eval(x, &gamma, &beta, &rm, &rv, eps),
    }
}

/// conv -> batch norm -> relu, the unit every block is assembled from.
fn conv_bn_relu<T: Scalar>(
    sess: &mut Session<T>,
    path: &str,
    spec: &ConvSpec,
    x: &Value<T>,
) -> Result<Value<T>> {
    let w = sess.bind(&format!("{path}.conv.w"))?;
    let b = if spec.bias {
        Some(sess.bind(&format!("{path}.conv.b"))?)
    } else {
        None
    };
    let y = sess.tape.conv2d(x, &w, b.as_ref(), spec)?;
    let y = batchnorm(sess, &format!("{path}.bn"), &y)?;
    Ok(sess.tape.relu(&y))
}

fn ds_conv_bn_relu<T: Scalar>(
    sess: &mut Session<T>,
    path: &str,
    spec: &ConvSpec,
    x: &Value<T>,
) -> Result<Value<T>> {
    let w_depth = sess.bind(&format!("{path}.dw.w"))?;
    let b_depth = sess.bind(&format!("{path}.dw.b"))?;
    let w_point = sess.bind(&format!("{path}.pw.w"))?;
    let b_point = sess.bind(&format!("{path}.pw.b"))?;
    let y = sess.tape.conv2d_depthwise_separable(
        x,
        &w_depth,
        Some(&b_depth),
        &w_point,
        Some(&b_point),
        spec,
    )?;
    let y = batchnorm(sess, &format!("{path}.bn"), &y)?;
    Ok(sess.tape.relu(&y))
}

fn decl_conv_bn_relu(out: &mut Vec<ParamDecl>, path: &str, spec: &ConvSpec) {
    decl_conv(out, &format!("{path}.conv"), spec);
    decl_bn(out, &format!("{path}.bn"), spec.out_channels);
}

fn decl_ds_conv_bn_relu(out: &mut Vec<ParamDecl>, path: &str, spec: &ConvSpec) {
    let (depth_spec, point_spec) = crate::ops::separable_parts(spec, true, true);
    decl_conv(out, &format!("{path}.dw"), &depth_spec);
    decl_conv(out, &format!("{path}.pw"), &point_spec);
    decl_bn(out, &format!("{path}.bn"), spec.out_channels);
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BlockSpec {
    /// Two 3x3 convolutions, each followed by batch norm and relu.
    ConvBlock { in_ch: usize, out_ch: usize },
    /// Squeeze-excitation channel gate.
    Se { channels: usize, reduction: usize },
    /// Two parallel 3x3 branches (dilation 1 and 3) fused by a 1x1 conv.
    Lg { in_ch: usize, out_ch: usize },
    /// Lg followed by a squeeze-excitation gate.
    Ls {
        in_ch: usize,
        out_ch: usize,
        se_reduction: usize,
    },
    /// Four depthwise-separable 3x3 branches at dilations 1/6/12/18,
    /// fused by a 1x1 conv and gated by squeeze-excitation.
    Ps {
        in_ch: usize,
        out_ch: usize,
        se_reduction: usize,
    },
}

impl BlockSpec {
    pub fn in_channels(&self) -> usize {
        match *self {
            BlockSpec::ConvBlock { in_ch, .. }
            | BlockSpec::Lg { in_ch, .. }
            | BlockSpec::Ls { in_ch, .. }
            | BlockSpec::Ps { in_ch, .. } => in_ch,
            BlockSpec::Se { channels, .. } => channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            BlockSpec::ConvBlock { out_ch, .. }
            | BlockSpec::Lg { out_ch, .. }
            | BlockSpec::Ls { out_ch, .. }
            | BlockSpec::Ps { out_ch, .. } => out_ch,
            BlockSpec::Se { channels, .. } => channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check_se = |channels: usize, reduction: usize| -> Result<()> {
            if reduction == 0 || channels % reduction != 0 {
                bail_spec!(
                    "squeeze-excitation reduction {reduction} must divide channel count {channels}"
                );
            }
            Ok(())
        };
        match *self {
            BlockSpec::ConvBlock { in_ch, out_ch } | BlockSpec::Lg { in_ch, out_ch } => {
                if in_ch == 0 || out_ch == 0 {
                    bail_spec!("block channel counts must be positive");
                }
            }
            BlockSpec::Se {
                channels,
                reduction,
            } => check_se(channels, reduction)?,
            BlockSpec::Ls {
                in_ch,
                out_ch,
                se_reduction,
            }
            | BlockSpec::Ps {
                in_ch,
                out_ch,
                se_reduction,
            } => {
                if in_ch == 0 || out_ch == 0 {
                    bail_spec!("block channel counts must be positive");
                }
                check_se(out_ch, se_reduction)?;
            }
        }
        Ok(())
    }

    /// Every parameter the block owns, prefixed with `path`, in the order
    /// the forward pass binds them.
    pub fn param_decls(&self, path: &str) -> Result<Vec<ParamDecl>> {
        self.validate()?;
        let mut out = Vec::new();
        match *self {
            BlockSpec::ConvBlock { in_ch, out_ch } => {
                decl_conv(&mut out, &format!("{path}.conv1"), &ConvSpec::k3(in_ch, out_ch, 1));
                decl_bn(&mut out, &format!("{path}.bn1"), out_ch);
                decl_conv(&mut out, &format!("{path}.conv2"), &ConvSpec::k3(out_ch, out_ch, 1));
                decl_bn(&mut out, &format!("{path}.bn2"), out_ch);
            }
            BlockSpec::Se {
                channels,
                reduction,
            } => {
                let squeezed = channels / reduction;
                decl_linear(&mut out, &format!("{path}.fc1"), channels, squeezed);
                decl_linear(&mut out, &format!("{path}.fc2"), squeezed, channels);
            }
            BlockSpec::Lg { in_ch, out_ch } => {
                decl_lg(&mut out, path, in_ch, out_ch);
            }
            BlockSpec::Ls {
                in_ch,
                out_ch,
                se_reduction,
            } => {
                decl_lg(&mut out, &format!("{path}.lg"), in_ch, out_ch);
                let se = BlockSpec::Se {
                    channels: out_ch,
                    reduction: se_reduction,
                };
                out.extend(se.param_decls(&format!("{path}.se"))?);
            }
            BlockSpec::Ps {
                in_ch,
                out_ch,
                se_reduction,
            } => {
                for d in PS_DILATIONS {
                    decl_ds_conv_bn_relu(
                        &mut out,
                        &format!("{path}.branch_d{d}"),
                        &ConvSpec::k3(in_ch, out_ch, d),
                    );
                }
                decl_conv_bn_relu(&mut out, &format!("{path}.fuse"), &ConvSpec::k1(4 * out_ch, out_ch));
                let se = BlockSpec::Se {
                    channels: out_ch,
                    reduction: se_reduction,
                };
                out.extend(se.param_decls(&format!("{path}.se"))?);
            }
        }
        Ok(out)
    }

    /// Learnable element count, straight off the declarations.
    pub fn param_count(&self, path: &str) -> Result<usize> {
        Ok(self
            .param_decls(path)?
            .iter()
            .filter(|d| d.learnable)
            .map(|d| d.dims.count())
            .sum())
    }

    pub fn forward<T: Scalar>(
        &self,
        sess: &mut Session<T>,
        path: &str,
        x: &Value<T>,
    ) -> Result<Value<T>> {
        if x.dims().c != self.in_channels() {
            return Err(Error::Shape(format!(
                "block at {path:?} expects {} input channels, got {}",
                self.in_channels(),
                x.dims().c
            )));
        }
        match *self {
            BlockSpec::ConvBlock { in_ch, out_ch } => {
                let w1 = sess.bind(&format!("{path}.conv1.w"))?;
                let b1 = sess.bind(&format!("{path}.conv1.b"))?;
                let y = sess
                    .tape
                    .conv2d(x, &w1, Some(&b1), &ConvSpec::k3(in_ch, out_ch, 1))?;
                let y = batchnorm(sess, &format!("{path}.bn1"), &y)?;
                let y = sess.tape.relu(&y);
                let w2 = sess.bind(&format!("{path}.conv2.w"))?;
                let b2 = sess.bind(&format!("{path}.conv2.b"))?;
                let y = sess
                    .tape
                    .conv2d(&y, &w2, Some(&b2), &ConvSpec::k3(out_ch, out_ch, 1))?;
                let y = batchnorm(sess, &format!("{path}.bn2"), &y)?;
                Ok(sess.tape.relu(&y))
            }
            BlockSpec::Se { .. } => se_forward(sess, path, x),
            BlockSpec::Lg { in_ch, out_ch } => lg_forward(sess, path, in_ch, out_ch, x),
            BlockSpec::Ls {
                in_ch,
                out_ch,
                ..
            } => {
                let y = lg_forward(sess, &format!("{path}.lg"), in_ch, out_ch, x)?;
                se_forward(sess, &format!("{path}.se"), &y)
            }
            BlockSpec::Ps { in_ch, out_ch, .. } => {
                let mut branches = Vec::with_capacity(PS_DILATIONS.len());
                for d in PS_DILATIONS {
                    branches.push(ds_conv_bn_relu(
                        sess,
                        &format!("{path}.branch_d{d}"),
                        &ConvSpec::k3(in_ch, out_ch, d),
                        x,
                    )?);
                }
                let refs: Vec<&Value<T>> = branches.iter().collect();
                let cat = sess.tape.concat_channels(&refs)?;
                let y = conv_bn_relu(
                    sess,
                    &format!("{path}.fuse"),
                    &ConvSpec::k1(4 * out_ch, out_ch),
                    &cat,
                )?;
                se_forward(sess, &format!("{path}.se"), &y)
            }
        }
    }
}

fn decl_lg(out: &mut Vec<ParamDecl>, path: &str, in_ch: usize, out_ch: usize) {
    decl_conv_bn_relu(out, &format!("{path}.branch_d1"), &ConvSpec::k3(in_ch, out_ch, 1));
    decl_conv_bn_relu(out, &format!("{path}.branch_d3"), &ConvSpec::k3(in_ch, out_ch, 3));
    decl_conv_bn_relu(out, &format!("{path}.fuse"), &ConvSpec::k1(2 * out_ch, out_ch));
}

fn lg_forward<T: Scalar>(
    sess: &mut Session<T>,
    path: &str,
    in_ch: usize,
    out_ch: usize,
    x: &Value<T>,
) -> Result<Value<T>> {
    let local = conv_bn_relu(
        sess,
        &format!("{path}.branch_d1"),
        &ConvSpec::k3(in_ch, out_ch, 1),
        x,
    )?;
    let global = conv_bn_relu(
        sess,
        &format!("{path}.branch_d3"),
        &ConvSpec::k3(in_ch, out_ch, 3),
        x,
    )?;
    let cat = sess.tape.concat_channels(&[&local, &global])?;
    conv_bn_relu(sess, &format!("{path}.fuse"), &ConvSpec::k1(2 * out_ch, out_ch), &cat)
}

fn se_forward<T: Scalar>(sess: &mut Session<T>, path: &str, x: &Value<T>) -> Result<Value<T>> {
    let fc1w = sess.bind(&format!("{path}.fc1.w"))?;
    let fc1b = sess.bind(&format!("{path}.fc1.b"))?;
    let fc2w = sess.bind(&format!("{path}.fc2.w"))?;
    let fc2b = sess.bind(&format!("{path}.fc2.b"))?;
    let pooled = sess.tape.global_avg_pool(x)?;
    let a = sess.tape.linear(&pooled, &fc1w, Some(&fc1b))?;
    let a = sess.tape.relu(&a);
    let a = sess.tape.linear(&a, &fc2w, Some(&fc2b))?;
    let gate = sess.tape.sigmoid(&a);
    sess.tape.scale_channels(x, &gate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, rng};

    fn materialize(decls: &[ParamDecl], seed: u64) -> ParamSet<f64> {
        let mut r = rng(seed);
        let mut ps = ParamSet::new();
        materialize_decls(decls, &mut ps, &mut r).unwrap();
        ps
    }

    fn run_block(spec: BlockSpec, x: &Tensor<f64>, seed: u64, mode: Mode) -> Tensor<f64> {
        let decls = spec.param_decls("blk").unwrap();
        let mut ps = materialize(&decls, seed);
        let mut sess = Session::new(&mut ps, mode, false);
        let xv = sess.tape.leaf(x.clone());
        spec.forward(&mut sess, "blk", &xv).unwrap().tensor().clone()
    }

    #[test]
    fn conv_block_learnable_count_64_to_128() {
        let spec = BlockSpec::ConvBlock { in_ch: 64, out_ch: 128 };
        assert_eq!(spec.param_count("b").unwrap(), 221_952);
    }

    #[test]
    fn se_learnable_count_64_r16() {
        let spec = BlockSpec::Se { channels: 64, reduction: 16 };
        assert_eq!(spec.param_count("b").unwrap(), 580);
    }

    #[test]
    fn lg_learnable_count_3_to_64() {
        let spec = BlockSpec::Lg { in_ch: 3, out_ch: 64 };
        assert_eq!(spec.param_count("b").unwrap(), 12_224);
    }

    #[test]
    fn ls_learnable_count_64_to_128() {
        let spec = BlockSpec::Ls { in_ch: 64, out_ch: 128, se_reduction: 16 };
        assert_eq!(spec.param_count("b").unwrap(), 183_560);
    }

    #[test]
    fn ps_learnable_count_256_to_512() {
        let spec = BlockSpec::Ps { in_ch: 256, out_ch: 512, se_reduction: 16 };
        assert_eq!(spec.param_count("b").unwrap(), 1_624_096);
    }

    #[test]
    fn se_with_zero_weights_halves_the_input() {
        let spec = BlockSpec::Se { channels: 4, reduction: 2 };
        let decls = spec.param_decls("blk").unwrap();
        let mut ps = ParamSet::<f64>::new();
        for d in &decls {
            ps.insert(&d.name, Tensor::zeros(d.dims), d.learnable).unwrap();
        }
        let x = rand_tensor(crate::tensor::dims(2, 4, 3, 3), 7);
        let mut sess = Session::new(&mut ps, Mode::Eval, false);
        let xv = sess.tape.leaf(x.clone());
        let y = spec.forward(&mut sess, "blk", &xv).unwrap();
        for (a, b) in y.tensor().data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn blocks_preserve_spatial_size_and_set_channels() {
        let x = rand_tensor(crate::tensor::dims(1, 3, 12, 12), 11);
        for (spec, out_ch) in [
            (BlockSpec::ConvBlock { in_ch: 3, out_ch: 8 }, 8),
            (BlockSpec::Lg { in_ch: 3, out_ch: 8 }, 8),
            (BlockSpec::Ls { in_ch: 3, out_ch: 8, se_reduction: 4 }, 8),
            (BlockSpec::Ps { in_ch: 3, out_ch: 8, se_reduction: 4 }, 8),
        ] {
            let y = run_block(spec, &x, 21, Mode::Train);
            assert_eq!(y.dims(), crate::tensor::dims(1, out_ch, 12, 12));
        }
    }

    #[test]
    fn ls_equals_lg_then_se_on_shared_parameters() {
        let ls = BlockSpec::Ls { in_ch: 3, out_ch: 8, se_reduction: 4 };
        let decls = ls.param_decls("blk").unwrap();
        let mut ps = materialize(&decls, 33);
        let mut ps2 = materialize(&decls, 33);
        let x = rand_tensor(crate::tensor::dims(2, 3, 6, 6), 34);

        let mut sess = Session::new(&mut ps, Mode::Eval, false);
        let xv = sess.tape.leaf(x.clone());
        let direct = ls.forward(&mut sess, "blk", &xv).unwrap().tensor().clone();

        let mut sess2 = Session::new(&mut ps2, Mode::Eval, false);
        let xv2 = sess2.tape.leaf(x);
        let lg = BlockSpec::Lg { in_ch: 3, out_ch: 8 };
        let mid = lg.forward(&mut sess2, "blk.lg", &xv2).unwrap();
        let se = BlockSpec::Se { channels: 8, reduction: 4 };
        let composed = se.forward(&mut sess2, "blk.se", &mid).unwrap();

        assert_eq!(direct.data(), composed.tensor().data());
    }

    #[test]
    fn train_mode_updates_running_stats_and_eval_does_not() {
        let spec = BlockSpec::ConvBlock { in_ch: 2, out_ch: 4 };
        let decls = spec.param_decls("blk").unwrap();
        let mut ps = materialize(&decls, 5);
        let x = rand_tensor(crate::tensor::dims(2, 2, 4, 4), 6);

        let before = ps.get("blk.bn1.running_mean").unwrap().clone();
        {
            let mut sess = Session::new(&mut ps, Mode::Eval, false);
            let xv = sess.tape.leaf(x.clone());
            spec.forward(&mut sess, "blk", &xv).unwrap();
        }
        assert_eq!(
            ps.get("blk.bn1.running_mean").unwrap().data(),
            before.data()
        );
        {
            let mut sess = Session::new(&mut ps, Mode::Train, false);
            let xv = sess.tape.leaf(x);
            spec.forward(&mut sess, "blk", &xv).unwrap();
        }
        assert_ne!(
            ps.get("blk.bn1.running_mean").unwrap().data(),
            before.data()
        );
    }

    #[test]
    fn forward_binds_every_learnable_parameter_exactly_once() {
        for spec in [
            BlockSpec::ConvBlock { in_ch: 3, out_ch: 6 },
            BlockSpec::Lg { in_ch: 3, out_ch: 6 },
            BlockSpec::Ls { in_ch: 3, out_ch: 6, se_reduction: 2 },
            BlockSpec::Ps { in_ch: 3, out_ch: 6, se_reduction: 2 },
            BlockSpec::Se { channels: 6, reduction: 2 },
        ] {
            let decls = spec.param_decls("blk").unwrap();
            let mut ps = materialize(&decls, 9);
            let x = rand_tensor(crate::tensor::dims(1, spec.in_channels(), 4, 4), 10);
            let mut sess = Session::new(&mut ps, Mode::Train, true);
            let xv = sess.tape.leaf(x);
            spec.forward(&mut sess, "blk", &xv).unwrap();
            let mut seen: Vec<usize> = sess.bound().iter().map(|(i, _)| *i).collect();
            seen.sort_unstable();
            seen.dedup();
            let learnable = sess.params().learnable_indices();
            assert_eq!(seen, learnable, "{spec:?}");
        }
    }

    #[test]
    fn se_rejects_reduction_that_does_not_divide() {
        let spec = BlockSpec::Se { channels: 10, reduction: 4 };
        assert!(spec.validate().is_err());
        assert!(spec.param_decls("b").is_err());
    }

    #[test]
    fn same_seed_same_output_bits() {
        let x = rand_tensor(crate::tensor::dims(1, 3, 8, 8), 50);
        let spec = BlockSpec::Ps { in_ch: 3, out_ch: 4, se_reduction: 2 };
        let a = run_block(spec, &x, 77, Mode::Train);
        let b = run_block(spec, &x, 77, Mode::Train);
        assert_eq!(a.data(), b.data());
    }
}
