use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs quoted for scoring ten million examples on one accelerator.
pub const FOOTNOTE_EXAMPLES: f64 = 1e7;
pub const FOOTNOTE_SEC_PER_EXAMPLE: f64 = 0.05;
pub const FOOTNOTE_WATTS: f64 = 350.0;
pub const FOOTNOTE_KG_PER_KWH: f64 = 0.368;
/// Totals stated alongside those inputs: hours, kWh, kg CO2.
pub const FOOTNOTE_STATED: (f64, f64, f64) = (142.2, 42.6, 15.6);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub hours: f64,
    pub kwh: f64,
    pub kg_co2: f64,
}

/// `hours = n·sec/3600`, `kWh = hours·watts/1000`, `kg = kWh·intensity`.
pub fn estimate_cost(n_examples: f64, sec_per_example: f64, watts: f64, kg_per_kwh: f64) -> Result<CostEstimate> {
    for (name, v) in [
        ("example count", n_examples),
        ("seconds per example", sec_per_example),
        ("power", watts),
        ("carbon intensity", kg_per_kwh),
    ] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::config(format!("{name} must be positive, got {v}")));
        }
    }
    let hours = n_examples * sec_per_example / 3600.0;
    let kwh = hours * watts / 1000.0;
    Ok(CostEstimate {
        hours,
        kwh,
        kg_co2: kwh * kg_per_kwh,
    })
}

/// Explains why the footnote inputs do not reproduce the footnote totals.
pub fn footnote_discrepancy_note(computed: &CostEstimate) -> String {
    let (h, k, c) = FOOTNOTE_STATED;
    format!(
        "footnote inputs give {:.1} h, {:.1} kWh, {:.1} kg CO2, but the stated totals are {h} h, {k} kWh, {c} kg; \
         the stated figures are not mutually consistent ({h} h at {FOOTNOTE_WATTS} W is {:.1} kWh), \
         so the estimator applies the formula as written",
        computed.hours,
        computed.kwh,
        computed.kg_co2,
        h * FOOTNOTE_WATTS / 1000.0,
    )
}
