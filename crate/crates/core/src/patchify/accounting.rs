use serde::{Deserialize, Serialize};

/// Geometry needed to weigh views by the pixels they carry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccountingConfig {
    pub global_count: usize,
    pub local_count: usize,
    pub query_count: usize,
    /// Reference (global view) resolution.
    pub global_res: usize,
    pub local_res: usize,
    pub patch: usize,
}

impl AccountingConfig {
    /// Two 224² global views, ten 96² local views, ten 16² query crops.
    pub fn paper_scale() -> Self {
        AccountingConfig {
            global_count: 2,
            local_count: 10,
            query_count: 10,
            global_res: 224,
            local_res: 96,
            patch: 16,
        }
    }

    /// The counts and resolutions a training view configuration produces.
    pub fn from_views(v: &super::ViewConfig) -> Self {
        AccountingConfig {
            global_count: v.global_count,
            local_count: v.local_count,
            query_count: v.query_count,
            global_res: v.global_res,
            local_res: v.local_res,
            patch: v.patch,
        }
    }
}

impl Default for AccountingConfig {
    fn default() -> Self {
        AccountingConfig::paper_scale()
    }
}

/// Images actually seen per source image, in units of one global view:
/// `G + L·(R_l/R_g)² + Q·(P/R_g)²`.
pub fn effective_epoch_ratio(cfg: &AccountingConfig) -> f64 {
    let rg = cfg.global_res as f64;
    let local = (cfg.local_res as f64 / rg).powi(2);
    let query = (cfg.patch as f64 / rg).powi(2);
    cfg.global_count as f64 + cfg.local_count as f64 * local + cfg.query_count as f64 * query
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_global_views_only() {
        let cfg = AccountingConfig {
            local_count: 0,
            query_count: 0,
            ..AccountingConfig::paper_scale()
        };
        assert_eq!(effective_epoch_ratio(&cfg), 2.0);
    }

    #[test]
    fn linear_in_each_count() {
        let base = AccountingConfig::paper_scale();
        let r0 = effective_epoch_ratio(&base);
        let more = AccountingConfig {
            local_count: base.local_count + 3,
            ..base
        };
        let step = (96.0f64 / 224.0).powi(2);
        assert!((effective_epoch_ratio(&more) - r0 - 3.0 * step).abs() < 1e-12);
    }
}
