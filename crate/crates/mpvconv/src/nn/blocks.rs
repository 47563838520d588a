//! Small forward/backward building blocks: conv+norm+activation, shared
//! MLP, and the bare linear classifier head. Train-mode forwards cache what
//! their backward pass needs; the caches are consumed by `backward`.

use crate::error::Result;
use crate::nn::ops::{
    activation, activation_vjp, batch_norm_eval, batch_norm_train, batch_norm_train_vjp, conv3d,
    conv3d_vjp, pointwise_linear, pointwise_linear_vjp, BatchNormCtx,
};
use crate::nn::{Activation, BatchNormState, Mode, Parameter};
use crate::tensor::{Scalar, Tensor};

/// Callback used to walk every learnable parameter of a module in a stable
/// structural order.
pub type ParamVisitor<'a, T> = dyn FnMut(&mut Parameter<T>) + 'a;
/// Callback over non-learnable per-module tensors (batch-norm running stats).
pub type BufferVisitor<'a, T> = dyn FnMut(&str, &mut Tensor<T>) + 'a;

struct NormActCache<T> {
    input: Tensor<T>,
    bn_ctx: BatchNormCtx<T>,
    act_input: Tensor<T>,
}

/// 3-D convolution followed by batch norm and an activation.
#[derive(Clone, Debug)]
pub struct Conv3dBlock<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub bn: BatchNormState<T>,
    pub act: Activation,
    kernel: usize,
    padding: usize,
    cache: Option<NormActCache<T>>,
}

impl<T> Clone for NormActCache<T>
where
    T: Clone,
{
    fn clone(&self) -> Self {
        Self {
            input: self.input.clone(),
            bn_ctx: self.bn_ctx.clone(),
            act_input: self.act_input.clone(),
        }
    }
}

impl<T> std::fmt::Debug for NormActCache<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("NormActCache")
    }
}

impl<T: Scalar> Conv3dBlock<T> {
    pub fn new(name: &str, ci: usize, co: usize, kernel: usize, act: Activation, seed: u64) -> Self {
        let fan_in = ci * kernel * kernel * kernel;
        Self {
            weight: Parameter::uniform(
                format!("{name}.weight"),
                &[co, ci, kernel, kernel, kernel],
                fan_in,
                seed,
            ),
            bias: Parameter::zeros(format!("{name}.bias"), &[co]),
            bn: BatchNormState::new(&format!("{name}.bn"), co),
            act,
            kernel,
            padding: (kernel - 1) / 2,
            cache: None,
        }
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let conv_out = conv3d(input, &self.weight.value, &self.bias.value, self.padding)?;
        match mode {
            Mode::Train => {
                let (bn_out, bn_ctx) = batch_norm_train(&conv_out, &mut self.bn)?;
                let out = activation(&bn_out, self.act);
                self.cache = Some(NormActCache {
                    input: input.clone(),
                    bn_ctx,
                    act_input: bn_out,
                });
                Ok(out)
            }
            Mode::Eval => {
                let bn_out = batch_norm_eval(&conv_out, &self.bn)?;
                Ok(activation(&bn_out, self.act))
            }
        }
    }

    /// Backward through activation, batch norm and convolution. Accumulates
    /// parameter gradients and returns the gradient w.r.t. the block input.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .expect("Conv3dBlock::backward without a train-mode forward");
        let g_act = activation_vjp(&cache.act_input, self.act, grad_out);
        let (g_bn, d_gamma, d_beta) =
            batch_norm_train_vjp(&cache.bn_ctx, &self.bn.gamma.value, &g_act)?;
        self.bn.gamma.grad.add_assign(&d_gamma)?;
        self.bn.beta.grad.add_assign(&d_beta)?;
        let (g_in, d_w, d_b) = conv3d_vjp(&cache.input, &self.weight.value, &g_bn, self.padding)?;
        self.weight.grad.add_assign(&d_w)?;
        self.bias.grad.add_assign(&d_b)?;
        Ok(g_in)
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<T>) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.bn.gamma);
        f(&mut self.bn.beta);
    }

    pub fn visit_buffers(&mut self, f: &mut BufferVisitor<T>) {
        let name = self.bn.name.clone();
        f(&format!("{name}.running_mean"), &mut self.bn.running_mean);
        f(&format!("{name}.running_var"), &mut self.bn.running_var);
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel() + self.bn.gamma.numel() + self.bn.beta.numel()
    }
}

/// Shared MLP: per-point linear map followed by batch norm and an activation.
#[derive(Clone, Debug)]
pub struct SharedMlpBlock<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub bn: BatchNormState<T>,
    pub act: Activation,
    cache: Option<NormActCache<T>>,
}

impl<T: Scalar> SharedMlpBlock<T> {
    pub fn new(name: &str, ci: usize, co: usize, act: Activation, seed: u64) -> Self {
        Self {
            weight: Parameter::uniform(format!("{name}.weight"), &[co, ci], ci, seed),
            bias: Parameter::zeros(format!("{name}.bias"), &[co]),
            bn: BatchNormState::new(&format!("{name}.bn"), co),
            act,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let lin_out = pointwise_linear(input, &self.weight.value, &self.bias.value)?;
        match mode {
            Mode::Train => {
                let (bn_out, bn_ctx) = batch_norm_train(&lin_out, &mut self.bn)?;
                let out = activation(&bn_out, self.act);
                self.cache = Some(NormActCache {
                    input: input.clone(),
                    bn_ctx,
                    act_input: bn_out,
                });
                Ok(out)
            }
            Mode::Eval => {
                let bn_out = batch_norm_eval(&lin_out, &self.bn)?;
                Ok(activation(&bn_out, self.act))
            }
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .expect("SharedMlpBlock::backward without a train-mode forward");
        let g_act = activation_vjp(&cache.act_input, self.act, grad_out);
        let (g_bn, d_gamma, d_beta) =
            batch_norm_train_vjp(&cache.bn_ctx, &self.bn.gamma.value, &g_act)?;
        self.bn.gamma.grad.add_assign(&d_gamma)?;
        self.bn.beta.grad.add_assign(&d_beta)?;
        let (g_in, d_w, d_b) = pointwise_linear_vjp(&cache.input, &self.weight.value, &g_bn)?;
        self.weight.grad.add_assign(&d_w)?;
        self.bias.grad.add_assign(&d_b)?;
        Ok(g_in)
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<T>) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.bn.gamma);
        f(&mut self.bn.beta);
    }

    pub fn visit_buffers(&mut self, f: &mut BufferVisitor<T>) {
        let name = self.bn.name.clone();
        f(&format!("{name}.running_mean"), &mut self.bn.running_mean);
        f(&format!("{name}.running_var"), &mut self.bn.running_var);
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel() + self.bn.gamma.numel() + self.bn.beta.numel()
    }
}

/// Plain per-point linear classifier head (no norm, no activation).
#[derive(Clone, Debug)]
pub struct LinearHead<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> LinearHead<T> {
    pub fn new(name: &str, ci: usize, co: usize, seed: u64) -> Self {
        Self {
            weight: Parameter::uniform(format!("{name}.weight"), &[co, ci], ci, seed),
            bias: Parameter::zeros(format!("{name}.bias"), &[co]),
            cache: None,
        }
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let out = pointwise_linear(input, &self.weight.value, &self.bias.value)?;
        if mode == Mode::Train {
            self.cache = Some(input.clone());
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let input = self
            .cache
            .take()
            .expect("LinearHead::backward without a train-mode forward");
        let (g_in, d_w, d_b) = pointwise_linear_vjp(&input, &self.weight.value, grad_out)?;
        self.weight.grad.add_assign(&d_w)?;
        self.bias.grad.add_assign(&d_b)?;
        Ok(g_in)
    }

    pub fn visit_params(&mut self, f: &mut ParamVisitor<T>) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    pub fn param_count(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }
}
