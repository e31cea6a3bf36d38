//! TP/EP communication decision report: joins the communication volume
//! models with a hardware profile into the five standard scheme rows.

use moeperf_core::comm::{
    comm_time, ep_comm_volume, group_limited_ep_volume, tp_comm_volume, ParallelConfig, Placement,
};
use moeperf_core::config::{HardwareProfile, ModelConfig};
use moeperf_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow {
    pub scheme: &'static str,
    pub placement: Placement,
    pub volume_elements: u64,
    pub volume_bytes: u64,
    pub time_s: f64,
    pub ratio_vs_tp_intra: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanReport {
    pub n_d: u32,
    pub tokens: u64,
    pub groups_touched: u32,
    pub rows: Vec<PlanRow>,
}

/// Build the TP-intra, TP-inter, EP-intra, EP-inter, and group-limited-EP
/// rows. Time ratios are against the TP intra-node row.
///
/// `groups_touched` defaults to the model's group constraint when it has
/// one, otherwise to `min(n_a, n_d)`.
pub fn comm_plan(
    model: &ModelConfig,
    hw: &HardwareProfile,
    n_d: u32,
    tokens: u64,
    groups_touched: Option<u32>,
) -> Result<PlanReport> {
    model.validate()?;
    hw.validate()?;
    if n_d < 2 {
        return Err(Error::InvalidArgument(format!(
            "communication planning needs n_d >= 2, got {n_d}"
        )));
    }
    let groups_touched = groups_touched.unwrap_or_else(|| {
        model
            .group_config
            .map(|g| g.topk_group)
            .unwrap_or(model.n_a.min(n_d))
    });

    let cfg = |placement: Placement| ParallelConfig {
        n_d,
        placement,
        tokens,
        d: model.d,
        n_a: model.n_a,
        bytes_per_element: model.bytes_per_element,
    };

    let tp_volume = tp_comm_volume(&cfg(Placement::IntraNode));
    let ep_volume = ep_comm_volume(&cfg(Placement::IntraNode));
    let grouped_volume = group_limited_ep_volume(&cfg(Placement::InterNode), groups_touched)?;

    let entries: [(&'static str, Placement, u64); 5] = [
        ("tp", Placement::IntraNode, tp_volume),
        ("tp", Placement::InterNode, tp_volume),
        ("ep", Placement::IntraNode, ep_volume),
        ("ep", Placement::InterNode, ep_volume),
        ("group_limited_ep", Placement::InterNode, grouped_volume),
    ];

    let baseline = comm_time(tp_volume, &cfg(Placement::IntraNode), hw)?;
    let mut rows = Vec::with_capacity(entries.len());
    for (scheme, placement, volume) in entries {
        let time_s = comm_time(volume, &cfg(placement), hw)?;
        rows.push(PlanRow {
            scheme,
            placement,
            volume_elements: volume,
            volume_bytes: volume * u64::from(model.bytes_per_element),
            time_s,
            ratio_vs_tp_intra: time_s / baseline,
        });
    }
    Ok(PlanReport {
        n_d,
        tokens,
        groups_touched,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use moeperf_core::config::{load_hardware_preset, load_model_preset};

    #[test]
    fn five_rows_with_consistent_ratios() {
        let mut model = load_model_preset("v2-lite").unwrap();
        model.n_a = 2; // the coarse-grained comparison point
        let hw = load_hardware_preset("a800").unwrap();
        let plan = comm_plan(&model, &hw, 8, 1024, Some(2)).unwrap();
        assert_eq!(plan.rows.len(), 5);
        assert_eq!(plan.rows[0].ratio_vs_tp_intra, 1.0);

        // EP inter-node vs TP intra-node keeps comparable latency
        let ep_inter = &plan.rows[3];
        assert_eq!(ep_inter.scheme, "ep");
        assert_relative_eq!(
            ep_inter.ratio_vs_tp_intra,
            (2.0 / 7.0) * (160.0 / 50.0),
            epsilon = 1e-12
        );

        // volume ratio column: EP vs TP = n_a / (n_d - 1)
        let tp = &plan.rows[0];
        let ep = &plan.rows[2];
        assert_relative_eq!(
            ep.volume_bytes as f64 / tp.volume_bytes as f64,
            2.0 / 7.0,
            epsilon = 1e-12
        );

        // grouped row does not exceed plain EP when groups fit in n_a
        let grouped = &plan.rows[4];
        assert!(grouped.volume_bytes <= ep.volume_bytes);
    }

    #[test]
    fn defaults_come_from_the_model() {
        let model = load_model_preset("v3").unwrap();
        let hw = load_hardware_preset("a800").unwrap();
        let plan = comm_plan(&model, &hw, 8, 64, None).unwrap();
        assert_eq!(plan.groups_touched, 2);
        assert!(comm_plan(&model, &hw, 1, 64, None).is_err());
    }
}
