use std::io::Write;

/// One lower-level iteration as recorded by the optimizers.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub loss: f64,
    pub constraint_satisfaction: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIters,
    SmallGradient,
    LossPlateau,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LowerHistory {
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
}

impl LowerHistory {
    pub(crate) fn new() -> Self {
        LowerHistory {
            records: Vec::new(),
            stop: StopReason::MaxIters,
        }
    }

    pub fn iterations(&self) -> usize {
        self.records.len()
    }

    /// Writes `iter,loss,constraint_satisfaction,grad_norm,wall_ms`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "iter,loss,constraint_satisfaction,grad_norm,wall_ms")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{},{:e},{:.4}",
                r.iter, r.loss, r.constraint_satisfaction, r.grad_norm, r.wall_ms
            )?;
        }
        Ok(())
    }

    /// Applies the shared stopping rule after pushing `record`.
    pub(crate) fn push_and_check(
        &mut self,
        record: IterationRecord,
        grad_tol: f64,
        loss_rel_tol: f64,
        window: usize,
    ) -> bool {
        self.records.push(record);
        if record.grad_norm < grad_tol {
            self.stop = StopReason::SmallGradient;
            return true;
        }
        let len = self.records.len();
        if window > 0 && len > window {
            let old = self.records[len - 1 - window].loss;
            let rel = (record.loss - old).abs() / old.abs().max(f64::MIN_POSITIVE);
            if rel < loss_rel_tol {
                self.stop = StopReason::LossPlateau;
                return true;
            }
        }
        false
    }
}
