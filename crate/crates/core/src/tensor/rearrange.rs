use super::{numel, Element, Result, Tensor, TensorError};

/// A resolved einops-style axis relabeling such as `"b c t n -> (b t) c n"`.
///
/// Each side is a list of axis names; parenthesised names form a merged axis.
/// Every name on the left must appear exactly once on the right. A plan is a
/// reshape into elementary axes, a permutation, and a reshape into the output
/// grouping, so it is always a bijection on element coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RearrangePlan {
    input_shape: Vec<usize>,
    elementary_shape: Vec<usize>,
    perm: Vec<usize>,
    output_shape: Vec<usize>,
    lhs: Vec<Vec<String>>,
    rhs: Vec<Vec<String>>,
    sizes: Vec<(String, usize)>,
}

fn parse_side(pattern: &str, side: &str) -> Result<Vec<Vec<String>>> {
    let bad = |reason: &str| TensorError::Pattern {
        pattern: pattern.to_string(),
        reason: reason.to_string(),
    };
    let mut groups = Vec::new();
    let mut current: Option<Vec<String>> = None;
    let spaced = side.replace('(', " ( ").replace(')', " ) ").replace(',', " ");
    for tok in spaced.split_whitespace() {
        match tok {
            "(" => {
                if current.is_some() {
                    return Err(bad("nested parentheses"));
                }
                current = Some(Vec::new());
            }
            ")" => {
                let g = current.take().ok_or_else(|| bad("unbalanced `)`"))?;
                groups.push(g);
            }
            name => {
                if !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
                    return Err(bad(&format!("invalid axis name `{name}`")));
                }
                match current.as_mut() {
                    Some(g) => g.push(name.to_string()),
                    None => groups.push(vec![name.to_string()]),
                }
            }
        }
    }
    if current.is_some() {
        return Err(bad("unbalanced `(`"));
    }
    Ok(groups)
}

impl RearrangePlan {
    /// Resolves `pattern` against a concrete input shape. `sizes` supplies the
    /// extent of split axes that cannot be inferred (at most one unknown per
    /// input group).
    pub fn new(pattern: &str, input_shape: &[usize], sizes: &[(&str, usize)]) -> Result<Self> {
        let bad = |reason: String| TensorError::Pattern {
            pattern: pattern.to_string(),
            reason,
        };
        let (l, r) = pattern
            .split_once("->")
            .ok_or_else(|| bad("missing `->`".into()))?;
        let lhs = parse_side(pattern, l)?;
        let rhs = parse_side(pattern, r)?;
        if lhs.len() != input_shape.len() {
            return Err(bad(format!(
                "left side has {} axes but input has rank {}",
                lhs.len(),
                input_shape.len()
            )));
        }
        let lnames: Vec<&String> = lhs.iter().flatten().collect();
        let rnames: Vec<&String> = rhs.iter().flatten().collect();
        for (i, n) in lnames.iter().enumerate() {
            if lnames[..i].contains(n) {
                return Err(bad(format!("axis `{n}` repeated on the left")));
            }
        }
        if lnames.len() != rnames.len() || !lnames.iter().all(|n| rnames.contains(n)) {
            return Err(bad("both sides must name the same axes".into()));
        }

        let mut resolved: Vec<(String, usize)> = Vec::new();
        for (group, &dim) in lhs.iter().zip(input_shape) {
            let mut known = 1usize;
            let mut unknown = None;
            for name in group {
                match sizes.iter().find(|(n, _)| n == name) {
                    Some(&(_, s)) => known *= s,
                    None if group.len() == 1 => known *= dim,
                    None if unknown.is_none() => unknown = Some(name.clone()),
                    None => {
                        return Err(bad(format!(
                            "group ({}) has more than one unsized axis",
                            group.join(" ")
                        )))
                    }
                }
            }
            if known == 0 || dim % known != 0 {
                return Err(TensorError::NotDivisible {
                    op: "rearrange",
                    size: dim,
                    factor: known,
                });
            }
            for name in group {
                let size = if Some(name) == unknown.as_ref() {
                    dim / known
                } else if group.len() == 1 {
                    dim
                } else {
                    sizes.iter().find(|(n, _)| n == name).map(|p| p.1).unwrap_or(0)
                };
                resolved.push((name.clone(), size));
            }
            if unknown.is_none() && known != dim {
                return Err(bad(format!(
                    "group ({}) sizes multiply to {known}, axis has {dim}",
                    group.join(" ")
                )));
            }
        }

        let elementary_shape: Vec<usize> = resolved.iter().map(|p| p.1).collect();
        let perm: Vec<usize> = rnames
            .iter()
            .map(|n| lnames.iter().position(|m| m == n).unwrap())
            .collect();
        let output_shape = rhs
            .iter()
            .map(|g| {
                g.iter()
                    .map(|n| resolved.iter().find(|p| &p.0 == n).unwrap().1)
                    .product()
            })
            .collect();
        Ok(Self {
            input_shape: input_shape.to_vec(),
            elementary_shape,
            perm,
            output_shape,
            lhs,
            rhs,
            sizes: resolved,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub(crate) fn elementary_shape(&self) -> &[usize] {
        &self.elementary_shape
    }

    pub(crate) fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// The plan mapping this plan's output back to its input.
    pub fn inverse(&self) -> Self {
        let fmt = |side: &[Vec<String>]| {
            side.iter()
                .map(|g| {
                    if g.len() == 1 {
                        g[0].clone()
                    } else {
                        format!("({})", g.join(" "))
                    }
                })
                .collect::<Vec<_>>()
                .join(" ")
        };
        let pattern = format!("{} -> {}", fmt(&self.rhs), fmt(&self.lhs));
        let sizes: Vec<(&str, usize)> = self.sizes.iter().map(|(n, s)| (n.as_str(), *s)).collect();
        Self::new(&pattern, &self.output_shape, &sizes).expect("inverse of a valid plan is valid")
    }

    pub fn apply<E: Element>(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "rearrange",
                lhs: x.shape().to_vec(),
                rhs: self.input_shape.clone(),
            });
        }
        debug_assert_eq!(numel(&self.elementary_shape), x.numel());
        x.reshape(&self.elementary_shape)?
            .permute(&self.perm)?
            .reshape_in_place(&self.output_shape)
    }
}

/// Shorthand for building and applying a plan in one call.
pub fn rearrange<E: Element>(x: &Tensor<E>, pattern: &str, sizes: &[(&str, usize)]) -> Result<Tensor<E>> {
    RearrangePlan::new(pattern, x.shape(), sizes)?.apply(x)
}

impl<E: Element> Tensor<E> {
    /// Einops-style axis relabeling; see [`RearrangePlan`].
    pub fn rearrange(&self, pattern: &str, sizes: &[(&str, usize)]) -> Result<Self> {
        rearrange(self, pattern, sizes)
    }
}
