//! Named-parameter plumbing shared by every model component: visiting for
//! the optimizer / EMA / checkpointing, and mapping for binding parameters
//! onto a tape before a differentiable forward pass.

use crate::tensor::{Scalar, Tensor};

pub trait Module<T: Scalar>: Sized {
    /// Visit every parameter as `(dotted.name, tensor)` in a deterministic order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    /// Mutable variant, same order.
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
    /// Rebuild the module with each parameter replaced by `f(param)`;
    /// used to watch parameters on a tape.
    fn map(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self;

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements `Module` for a struct given its parameter fields (`Tensor`s)
/// and child fields (other `Module`s). Remaining fields must be `Clone` and
/// are listed under `copy`.
macro_rules! impl_module {
    ($ty:ident { params: [$($p:ident),*], children: [$($c:ident),*], copy: [$($k:ident),*] }) => {
        impl<T: crate::tensor::Scalar> crate::module::Module<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &crate::tensor::Tensor<T>)) {
                $( f(&crate::module::join(prefix, stringify!($p)), &self.$p); )*
                $( self.$c.visit(&crate::module::join(prefix, stringify!($c)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut crate::tensor::Tensor<T>)) {
                $( f(&crate::module::join(prefix, stringify!($p)), &mut self.$p); )*
                $( self.$c.visit_mut(&crate::module::join(prefix, stringify!($c)), f); )*
            }
            fn map(&self, f: &mut dyn FnMut(&crate::tensor::Tensor<T>) -> crate::tensor::Tensor<T>) -> Self {
                $ty {
                    $( $p: f(&self.$p), )*
                    $( $c: self.$c.map(f), )*
                    $( $k: self.$k.clone(), )*
                }
            }
        }
    };
}
pub(crate) use impl_module;

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
    fn map(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> Self {
        self.iter().map(|m| m.map(f)).collect()
    }
}
