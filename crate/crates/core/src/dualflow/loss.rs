use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorad::{Tape, Var};

/// Loss graph nodes; absent terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub motion: Option<Var>,
    pub video: Var,
    pub smpl: Option<Var>,
}

/// Mean squared velocity error over the tokens after the clean ones. Inputs are `[B, N, C]`.
pub fn flow_loss<T: Scalar>(tape: &mut Tape<T>, v_hat: Var, target: Var, clean_tokens: usize) -> Result<Var> {
    let n = tape.shape(v_hat).get(1).copied().unwrap_or(0);
    if n <= clean_tokens {
        return Err(Error::shape("flow_loss", "no noised tokens"));
    }
    let a = tape.slice(v_hat, 1, clean_tokens, n - clean_tokens)?;
    let b = tape.slice(target, 1, clean_tokens, n - clean_tokens)?;
    tape.mse(a, b)
}

/// Mean over prediction sets of the per-frame squared pose error,
/// averaged over frames (and batch). Each set and `gt` are `[B, F-1, J*3]`.
pub fn pose_loss<T: Scalar>(tape: &mut Tape<T>, preds: &[Var], gt: Var) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::invalid("no pose predictions"));
    }
    let dim = *tape.shape(gt).last().ok_or_else(|| Error::shape("pose_loss", "scalar target"))?;
    let mut acc: Option<Var> = None;
    for &p in preds {
        let m = tape.mse(p, gt)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, m)?,
            None => m,
        });
    }
    let sum = acc.expect("non-empty");
    tape.scale(sum, T::lit(dim as f64 / preds.len() as f64))
}

/// Unweighted sum of the available terms.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    video: (Var, Var),
    motion: Option<(Var, Var)>,
    poses: Option<(&[Var], Var)>,
    clean_tokens: usize,
) -> Result<LossTerms> {
    let lv = flow_loss(tape, video.0, video.1, clean_tokens)?;
    let lm = motion.map(|(a, b)| flow_loss(tape, a, b, clean_tokens)).transpose()?;
    let ls = poses.map(|(p, gt)| pose_loss(tape, p, gt)).transpose()?;
    let mut total = lv;
    for term in [lm, ls].into_iter().flatten() {
        total = tape.add(total, term)?;
    }
    Ok(LossTerms {
        total,
        motion: lm,
        video: lv,
        smpl: ls,
    })
}
