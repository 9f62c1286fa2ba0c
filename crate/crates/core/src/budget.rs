//! FLOPs accounting and token-budget planning for a model family.
//!
//! Training cost is modelled as `6 * params * tokens`. A progressive family
//! spends, at stage `i`, whatever the scratch cost of stage `i` leaves after
//! the stages before it, so the whole family costs exactly as much as
//! training its largest member from scratch (up to floor rounding of token
//! counts).
//!
//! All FLOPs arithmetic is done in `u128`/`i128` and checked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tokens per parameter of the compute-optimal rule of thumb.
pub const CHINCHILLA_TOKENS_PER_PARAM: f64 = 20.0;

/// Training FLOPs of one model: `6 * params * tokens`.
pub fn flops(params: u64, tokens: u64) -> Result<u128> {
    (params as u128)
        .checked_mul(tokens as u128)
        .and_then(|pt| pt.checked_mul(6))
        .ok_or(Error::Overflow("flops"))
}

/// `round(20 * multiplier * params)`.
pub fn chinchilla_tokens(params: u64, multiplier: f64) -> Result<u64> {
    if params == 0 {
        return Err(Error::invalid("chinchilla_tokens: params must be positive"));
    }
    if !(multiplier.is_finite() && multiplier > 0.0) {
        return Err(Error::invalid(format!(
            "chinchilla_tokens: multiplier must be positive, got {multiplier}"
        )));
    }
    let tokens = (CHINCHILLA_TOKENS_PER_PARAM * multiplier * params as f64).round();
    if tokens >= u64::MAX as f64 {
        return Err(Error::Overflow("chinchilla_tokens"));
    }
    Ok(tokens as u64)
}

fn check_sizes(sizes: &[u64], other: &[u64]) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::invalid("a family needs at least one stage"));
    }
    if sizes.len() != other.len() {
        return Err(Error::invalid(format!(
            "{} sizes but {} token budgets",
            sizes.len(),
            other.len()
        )));
    }
    if sizes[0] == 0 {
        return Err(Error::invalid("model sizes must be positive"));
    }
    if let Some(w) = sizes.windows(2).position(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "sizes must be strictly increasing (stage {} = {} >= stage {} = {})",
            w,
            sizes[w],
            w + 1,
            sizes[w + 1]
        )));
    }
    Ok(())
}

/// Progressive token budgets from scratch budgets.
///
/// Stage 0 keeps its scratch budget. Every later stage receives the scratch
/// FLOPs of its own size minus everything spent so far, converted back to
/// whole tokens (floored). A stage whose residual cannot pay for one token is
/// an [`Error::InfeasiblePlan`].
pub fn plan_progressive(sizes: &[u64], scratch_tokens: &[u64]) -> Result<Vec<u64>> {
    check_sizes(sizes, scratch_tokens)?;
    let mut prog = Vec::with_capacity(sizes.len());
    prog.push(scratch_tokens[0]);
    let mut spent = flops(sizes[0], scratch_tokens[0])?;
    for i in 1..sizes.len() {
        let target = flops(sizes[i], scratch_tokens[i])?;
        let per_token = 6u128 * sizes[i] as u128;
        if target <= spent || target - spent < per_token {
            let residual = target as i128 - spent as i128;
            return Err(Error::InfeasiblePlan {
                stage: i,
                size: sizes[i],
                residual,
            });
        }
        let tokens = (target - spent) / per_token;
        let tokens = u64::try_from(tokens).map_err(|_| Error::Overflow("plan_progressive"))?;
        spent += flops(sizes[i], tokens)?;
        prog.push(tokens);
    }
    Ok(prog)
}

/// Linearly interpolated per-stage maximum learning rates. Endpoints are
/// returned bit-exactly.
pub fn lr_ladder(n_stages: usize, lr_first: f64, lr_last: f64) -> Result<Vec<f64>> {
    if n_stages == 0 {
        return Err(Error::invalid("lr_ladder: n_stages must be >= 1"));
    }
    if !(lr_last > 0.0 && lr_first >= lr_last && lr_first.is_finite()) {
        return Err(Error::invalid(format!(
            "lr_ladder: need lr_first >= lr_last > 0, got {lr_first} and {lr_last}"
        )));
    }
    if n_stages == 1 {
        return Ok(vec![lr_first]);
    }
    let last = n_stages - 1;
    Ok((0..n_stages)
        .map(|i| match i {
            0 => lr_first,
            i if i == last => lr_last,
            i => lr_first + (lr_last - lr_first) * i as f64 / last as f64,
        })
        .collect())
}

/// Optimizer steps needed to consume `tokens` at `batch * seq_len` tokens per
/// step, rounded up.
pub fn steps_for(tokens: u64, batch: u64, seq_len: u64) -> Result<u64> {
    if batch == 0 || seq_len == 0 {
        return Err(Error::invalid("steps_for: batch and seq_len must be positive"));
    }
    if tokens == 0 {
        return Err(Error::invalid("steps_for: tokens must be positive"));
    }
    let per_step = batch
        .checked_mul(seq_len)
        .ok_or(Error::Overflow("steps_for"))?;
    Ok(tokens.div_ceil(per_step))
}

/// Sizes, budgets and per-stage optimizer settings of a model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyPlan {
    pub sizes: Vec<u64>,
    pub scratch_tokens: Vec<u64>,
    pub prog_tokens: Vec<u64>,
    pub max_lrs: Vec<f64>,
    pub batch_sizes: Vec<u64>,
    pub seq_len: u64,
    pub chinchilla_mult: f64,
}

impl FamilyPlan {
    /// Builds a plan from scratch budgets, deriving the progressive budgets.
    pub fn from_scratch(
        sizes: Vec<u64>,
        scratch_tokens: Vec<u64>,
        max_lrs: Vec<f64>,
        batch_sizes: Vec<u64>,
        seq_len: u64,
        chinchilla_mult: f64,
    ) -> Result<Self> {
        let prog_tokens = plan_progressive(&sizes, &scratch_tokens)?;
        let plan = FamilyPlan {
            sizes,
            scratch_tokens,
            prog_tokens,
            max_lrs,
            batch_sizes,
            seq_len,
            chinchilla_mult,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Scratch budgets from the compute-optimal rule at `multiplier` times
    /// the base 20 tokens per parameter.
    pub fn chinchilla(
        sizes: Vec<u64>,
        multiplier: f64,
        max_lrs: Vec<f64>,
        batch_sizes: Vec<u64>,
        seq_len: u64,
    ) -> Result<Self> {
        let scratch = sizes
            .iter()
            .map(|&x| chinchilla_tokens(x, multiplier))
            .collect::<Result<Vec<_>>>()?;
        Self::from_scratch(sizes, scratch, max_lrs, batch_sizes, seq_len, multiplier)
    }

    pub fn n_stages(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_sizes(&self.sizes, &self.scratch_tokens)?;
        let n = self.sizes.len();
        for (name, len) in [
            ("prog_tokens", self.prog_tokens.len()),
            ("max_lrs", self.max_lrs.len()),
            ("batch_sizes", self.batch_sizes.len()),
        ] {
            if len != n {
                return Err(Error::invalid(format!(
                    "plan has {n} stages but {len} {name}"
                )));
            }
        }
        if self.seq_len == 0 {
            return Err(Error::invalid("plan seq_len must be positive"));
        }
        if self.batch_sizes.contains(&0) {
            return Err(Error::invalid("plan batch sizes must be positive"));
        }
        if let Some(lr) = self.max_lrs.iter().find(|lr| !(lr.is_finite() && **lr > 0.0)) {
            return Err(Error::invalid(format!("plan max_lr must be positive, got {lr}")));
        }
        let expected = plan_progressive(&self.sizes, &self.scratch_tokens)?;
        if expected != self.prog_tokens {
            return Err(Error::invalid(format!(
                "prog_tokens {:?} do not match the residual-FLOPs allocation {:?}",
                self.prog_tokens, expected
            )));
        }
        Ok(())
    }

    /// Optimizer steps of stage `i` under the given token budget.
    pub fn steps(&self, stage: usize, tokens: u64) -> Result<u64> {
        steps_for(tokens, self.batch_sizes[stage], self.seq_len)
    }
}

/// FLOPs totals of a plan under independent and progressive construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_stage_scratch_flops: Vec<u128>,
    pub per_stage_prog_flops: Vec<u128>,
    pub total_independent: u128,
    pub total_progressive: u128,
    pub reduction_fraction: f64,
}

pub fn savings_report(plan: &FamilyPlan) -> Result<FlopsReport> {
    plan.validate()?;
    let stage_flops = |tokens: &[u64]| -> Result<Vec<u128>> {
        plan.sizes
            .iter()
            .zip(tokens)
            .map(|(&x, &t)| flops(x, t))
            .collect()
    };
    let scratch = stage_flops(&plan.scratch_tokens)?;
    let prog = stage_flops(&plan.prog_tokens)?;
    let sum = |v: &[u128]| {
        v.iter()
            .try_fold(0u128, |acc, &f| acc.checked_add(f))
            .ok_or(Error::Overflow("savings_report"))
    };
    let total_independent = sum(&scratch)?;
    let total_progressive = sum(&prog)?;
    let reduction_fraction = if total_independent == 0 {
        0.0
    } else {
        1.0 - total_progressive as f64 / total_independent as f64
    };
    Ok(FlopsReport {
        per_stage_scratch_flops: scratch,
        per_stage_prog_flops: prog,
        total_independent,
        total_progressive,
        reduction_fraction,
    })
}

/// Formats a token count in billions with three significant digits.
pub fn format_billions(tokens: u64) -> String {
    format!("{}B", sig3(tokens as f64 / 1e9))
}

/// Formats a FLOPs count in ZFLOPs (1e21) with three significant digits.
pub fn format_zflops(flops: u128) -> String {
    format!("{}Z", sig3(flops as f64 / 1e21))
}

fn sig3(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let magnitude = v.abs().log10().floor() as i32;
    let decimals = (2 - magnitude).max(0) as usize;
    format!("{v:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;

    const B: u64 = 1_000_000_000;

    #[test]
    fn flops_examples() {
        assert_eq!(flops(B, 40 * B).unwrap(), 240_000_000_000_000_000_000);
        assert_eq!(flops(12345, 0).unwrap(), 0);
        assert_eq!(flops(8 * B, 240 * B).unwrap(), 11_520_000_000_000_000_000_000);
    }

    #[test]
    fn flops_overflow_is_reported() {
        assert!(matches!(flops(u64::MAX, u64::MAX), Err(Error::Overflow(_))));
    }

    #[test]
    fn chinchilla_examples() {
        assert_eq!(chinchilla_tokens(B, 1.0).unwrap(), 20 * B);
        assert_eq!(chinchilla_tokens(2 * B, 2.0).unwrap(), 80 * B);
        assert!(matches!(
            chinchilla_tokens(B, 0.0),
            Err(Error::InvalidArgument(_))
        ));
        assert!(chinchilla_tokens(0, 1.0).is_err());
    }

    #[test]
    fn progressive_tables() {
        let sizes = [B, 2 * B, 4 * B, 8 * B];
        assert_eq!(
            plan_progressive(&sizes, &[40 * B, 80 * B, 160 * B, 320 * B]).unwrap(),
            vec![40 * B, 60 * B, 120 * B, 240 * B]
        );
        assert_eq!(
            plan_progressive(&sizes, &[20 * B, 40 * B, 80 * B, 160 * B]).unwrap(),
            vec![20 * B, 30 * B, 60 * B, 120 * B]
        );
    }

    #[test]
    fn decreasing_flops_is_infeasible() {
        let err = plan_progressive(&[B, 2 * B], &[100 * B, 40 * B]).unwrap_err();
        match err {
            Error::InfeasiblePlan { stage, residual, .. } => {
                assert_eq!(stage, 1);
                assert_eq!(residual, 480e18 as i128 - 600e18 as i128);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn equal_flops_is_infeasible() {
        assert!(matches!(
            plan_progressive(&[10, 20], &[100, 50]),
            Err(Error::InfeasiblePlan { stage: 1, .. })
        ));
    }

    #[test]
    fn sizes_must_increase() {
        assert!(plan_progressive(&[2, 2], &[1, 2]).is_err());
        assert!(plan_progressive(&[], &[]).is_err());
        assert!(plan_progressive(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn savings_two_x() {
        let plan = FamilyPlan::chinchilla(
            vec![B, 2 * B, 4 * B, 8 * B],
            2.0,
            vec![3e-4; 4],
            vec![960, 1920, 3840, 7680],
            1024,
        )
        .unwrap();
        let report = savings_report(&plan).unwrap();
        assert_eq!(report.total_independent, 20_400_000_000_000_000_000_000);
        assert_eq!(report.total_progressive, 15_360_000_000_000_000_000_000);
        assert!((report.reduction_fraction - 0.247).abs() < 5e-4);
    }

    #[test]
    fn savings_small_cases() {
        let single = FamilyPlan::chinchilla(vec![B], 1.0, vec![1e-3], vec![8], 64).unwrap();
        assert_eq!(savings_report(&single).unwrap().reduction_fraction, 0.0);

        let two = FamilyPlan::chinchilla(vec![B, 2 * B], 1.0, vec![1e-3; 2], vec![8; 2], 64)
            .unwrap();
        let r = savings_report(&two).unwrap();
        assert_eq!(r.total_independent, 600_000_000_000_000_000_000);
        assert_eq!(r.total_progressive, 480_000_000_000_000_000_000);
        assert!((r.reduction_fraction - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ladder_examples() {
        assert_eq!(
            lr_ladder(4, 1.5e-3, 3.0e-4).unwrap(),
            vec![1.5e-3, 1.1e-3, 7.0e-4, 3.0e-4]
        );
        assert_eq!(lr_ladder(2, 1.5e-3, 3.0e-4).unwrap(), vec![1.5e-3, 3.0e-4]);
        assert_eq!(lr_ladder(3, 9e-4, 3e-4).unwrap(), vec![9e-4, 6e-4, 3e-4]);
        assert_eq!(lr_ladder(1, 9e-4, 3e-4).unwrap(), vec![9e-4]);
        assert!(lr_ladder(3, 1e-4, 3e-4).is_err());
    }

    #[test]
    fn steps_examples() {
        assert_eq!(steps_for(40 * B, 960, 1024).unwrap(), 40_691);
        assert_eq!(steps_for(1024, 1, 1024).unwrap(), 1);
        assert_eq!(steps_for(1025, 1, 1024).unwrap(), 2);
        assert!(steps_for(1025, 0, 1024).is_err());
        assert!(steps_for(1025, 1, 0).is_err());
    }

    #[test]
    fn plan_rejects_tampered_prog_tokens() {
        let mut plan =
            FamilyPlan::chinchilla(vec![B, 2 * B], 1.0, vec![1e-3; 2], vec![8; 2], 64).unwrap();
        plan.prog_tokens[1] += 1;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn human_formatting() {
        assert_eq!(format_billions(40 * B), "40.0B");
        assert_eq!(format_billions(240 * B), "240B");
        assert_eq!(format_billions(1_500_000_000), "1.50B");
        assert_eq!(format_zflops(15_360_000_000_000_000_000_000), "15.4Z");
        assert_eq!(format_zflops(240_000_000_000_000_000_000), "0.240Z");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn telescoping_within_rounding(
                base in 1_000u64..1_000_000,
                steps in proptest::collection::vec((1u64..5, 1u64..400), 0..7),
                first_tokens in 1_000u64..1_000_000_000,
            ) {
                let mut sizes = vec![base];
                for (grow, _) in &steps {
                    let last = *sizes.last().unwrap();
                    sizes.push(last * (grow + 1));
                }
                // token counts chosen so scratch FLOPs strictly increase
                let mut scratch = vec![first_tokens];
                for (i, (_, pct)) in steps.iter().enumerate() {
                    let prev_flops = sizes[i] as u128 * scratch[i] as u128;
                    let needed = prev_flops / sizes[i + 1] as u128 + 2;
                    scratch.push((needed + needed * *pct as u128 / 100) as u64);
                }
                let prog = plan_progressive(&sizes, &scratch).unwrap();
                let n = sizes.len() - 1;
                let total: u128 = sizes.iter().zip(&prog).map(|(&x, &t)| flops(x, t).unwrap()).sum();
                let target = flops(sizes[n], scratch[n]).unwrap();
                prop_assert!(total <= target);
                prop_assert!(target - total < 6 * sizes[n] as u128);
            }

            #[test]
            fn more_scratch_never_fewer_prog(
                bump in 0u64..1_000_000,
                idx in 0usize..3,
            ) {
                let sizes = [1_000u64, 3_000, 7_000];
                let scratch = [5_000_000u64, 9_000_000, 20_000_000];
                let base = plan_progressive(&sizes, &scratch).unwrap();
                let mut bumped = scratch;
                bumped[idx] += bump;
                if let Ok(p) = plan_progressive(&sizes, &bumped) {
                    prop_assert!(p[idx] >= base[idx]);
                }
            }

            #[test]
            fn ladder_is_affine(n in 2usize..12, hi in 1e-4f64..1e-2, frac in 0.01f64..1.0) {
                let lo = hi * frac;
                let l = lr_ladder(n, hi, lo).unwrap();
                prop_assert_eq!(l[0], hi);
                prop_assert_eq!(l[n - 1], lo);
                let step = (lo - hi) / (n - 1) as f64;
                for w in l.windows(2) {
                    prop_assert!(((w[1] - w[0]) - step).abs() <= 1e-12 * hi);
                }
            }
        }
    }
}
