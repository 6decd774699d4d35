//! Parameter trees.
//!
//! Model structs are generic over their leaf type `P`: `Tensor<T>` for stored
//! parameters, [`Var`](crate::Var) once bound to a graph, `Option<Tensor<T>>`
//! for gradients. Leaves are always visited in the same order, so trees of
//! different leaf types can be zipped by position.

/// Visits named leaves in a fixed order.
pub trait ParamTree<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P));

    fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| out.push(p));
        out
    }

    fn leaves_mut(&mut self) -> Vec<&mut P> {
        let mut out: Vec<*mut P> = Vec::new();
        self.visit_mut("", &mut |_, p| out.push(p as *mut P));
        // SAFETY: each leaf is a distinct field, visited exactly once, and the
        // returned borrows are tied to `&mut self`.
        out.into_iter().map(|p| unsafe { &mut *p }).collect()
    }

    fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n, p)));
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

/// Weight and bias of one convolution (3×3 or 1×1).
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}

impl<P> Conv<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Conv<Q> {
        Conv {
            weight: f(&join(prefix, "weight"), &self.weight),
            bias: f(&join(prefix, "bias"), &self.bias),
        }
    }
}

impl<P> ParamTree<P> for Conv<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a P)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut P)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
