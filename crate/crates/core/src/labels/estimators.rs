use super::SurvivalLabels;

const Z_95: f64 = 1.959_963_984_540_054;

/// Product-limit survival with 95% bands `S exp(+-z sigma)`, where
/// `sigma^2 = sum d / (n (n - d))` (Greenwood on the log scale).
#[derive(Debug, Clone, PartialEq)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// Right-continuous step value at `t`.
    pub fn survival_at(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 1.0,
            i => self.survival[i - 1],
        }
    }
}

/// Aalen-Johansen cumulative incidence per cause, with the all-cause
/// event-free survival evaluated on the same time points.
#[derive(Debug, Clone, PartialEq)]
pub struct CifCurves {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    /// `cif[k - 1][i]` is the incidence of cause `k` at `times[i]`.
    pub cif: Vec<Vec<f64>>,
    pub at_risk: Vec<usize>,
}

impl CifCurves {
    pub fn num_risks(&self) -> usize {
        self.cif.len()
    }
}

/// Distinct event times with (at risk, events per cause) counts.
struct RiskTable {
    times: Vec<f64>,
    at_risk: Vec<usize>,
    deaths: Vec<Vec<usize>>,
}

fn risk_table(labels: &SurvivalLabels) -> RiskTable {
    let k = labels.num_risks.max(1) as usize;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels.durations[a].total_cmp(&labels.durations[b]));
    let mut table = RiskTable {
        times: vec![],
        at_risk: vec![],
        deaths: vec![],
    };
    let mut remaining = labels.len();
    let mut i = 0;
    while i < order.len() {
        let t = labels.durations[order[i]];
        let mut j = i;
        let mut d = vec![0usize; k];
        while j < order.len() && labels.durations[order[j]] == t {
            let e = labels.events[order[j]] as usize;
            if e > 0 {
                d[(e - 1).min(k - 1)] += 1;
            }
            j += 1;
        }
        if d.iter().any(|&x| x > 0) {
            table.times.push(t);
            table.at_risk.push(remaining);
            table.deaths.push(d);
        }
        remaining -= j - i;
        i = j;
    }
    table
}

pub fn kaplan_meier(labels: &SurvivalLabels) -> KmCurve {
    let table = risk_table(labels);
    let mut curve = KmCurve {
        times: table.times.clone(),
        survival: vec![],
        ci_lower: vec![],
        ci_upper: vec![],
        at_risk: table.at_risk.clone(),
        events: vec![],
    };
    let mut s = 1.0;
    let mut greenwood = 0.0;
    for (idx, deaths) in table.deaths.iter().enumerate() {
        let n = table.at_risk[idx] as f64;
        let d: usize = deaths.iter().sum();
        let df = d as f64;
        s *= 1.0 - df / n;
        curve.events.push(d);
        curve.survival.push(s);
        if df < n {
            greenwood += df / (n * (n - df));
            let sigma = greenwood.sqrt();
            curve.ci_lower.push(s * (-Z_95 * sigma).exp());
            curve.ci_upper.push((s * (Z_95 * sigma).exp()).min(1.0));
        } else {
            curve.ci_lower.push(0.0);
            curve.ci_upper.push(0.0);
        }
    }
    curve
}

pub fn cumulative_incidence(labels: &SurvivalLabels) -> CifCurves {
    let table = risk_table(labels);
    let k = labels.num_risks.max(1) as usize;
    let mut curves = CifCurves {
        times: table.times.clone(),
        survival: vec![],
        cif: vec![vec![]; k],
        at_risk: table.at_risk.clone(),
    };
    let mut s = 1.0;
    let mut acc = vec![0.0; k];
    for (idx, deaths) in table.deaths.iter().enumerate() {
        let n = table.at_risk[idx] as f64;
        let d: usize = deaths.iter().sum();
        for c in 0..k {
            acc[c] += s * deaths[c] as f64 / n;
            curves.cif[c].push(acc[c]);
        }
        s *= 1.0 - d as f64 / n;
        curves.survival.push(s);
    }
    curves
}
