use crate::error::{Result, SateError};
use crate::model::Checkpoint;
use crate::numerics::Tensor;

/// Element-wise mean of checkpoints with identical names and shapes.
///
/// Each element's values are sorted before summing in `f64`, so the result
/// does not depend on the input order and `k` copies of one checkpoint
/// average back to it exactly.
pub fn average_checkpoints(ckpts: &[&Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts
        .first()
        .ok_or_else(|| SateError::Contract("nothing to average".into()))?;
    for c in &ckpts[1..] {
        if c.len() != first.len() {
            return Err(SateError::Checkpoint {
                name: "*".into(),
                detail: format!("{} vs {} parameters", c.len(), first.len()),
            });
        }
        if let Some(((n, t), _)) = c
            .iter()
            .zip(first.iter())
            .find(|((n, t), (m, u))| n != m || t.shape() != u.shape())
        {
            return Err(SateError::Checkpoint {
                name: n.to_string(),
                detail: format!("name or shape {:?} differs between checkpoints", t.shape()),
            });
        }
    }
    let k = ckpts.len() as f64;
    let mut out = Checkpoint::new();
    let mut column = vec![0.0f32; ckpts.len()];
    let mut iters: Vec<_> = ckpts.iter().map(|c| c.iter()).collect();
    for (name, t) in first.iter() {
        let tensors: Vec<&Tensor> = iters.iter_mut().map(|it| it.next().expect("checked").1).collect();
        let data = (0..t.len())
            .map(|e| {
                for (slot, u) in column.iter_mut().zip(&tensors) {
                    *slot = u.data()[e];
                }
                column.sort_by(f32::total_cmp);
                (column.iter().map(|&v| v as f64).sum::<f64>() / k) as f32
            })
            .collect();
        out.push(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}
