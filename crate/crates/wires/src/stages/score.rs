use std::path::PathBuf;

use dsm_quality::{grid, load_model, predict_risk, recommend_parameters, Candidate, FeatureMap, QualityError, QualityModel};
use serde::Deserialize;
use serde_json::Value;

use crate::record::{RecordType, WireRecord};
use crate::registry::{parse_params, BuildContext, OutType, PortSpec, StageFactory};
use crate::stage::{Control, ControlReply, Outbox, Stage};

pub const RPM_FEATURE: &str = "params.spindle_rpm";
pub const FEED_FEATURE: &str = "params.feed_mm_s";
pub const CHIP_LOAD_FEATURE: &str = "params.chip_load";

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendGrid {
    pub rpm: Vec<f64>,
    pub feed: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Params {
    model_path: String,
    #[serde(default)]
    recommend: Option<RecommendGrid>,
}

fn check(params: &Value) -> Result<Params, String> {
    let p: Params = parse_params(params)?;
    if let Some(g) = &p.recommend {
        if g.rpm.is_empty() || g.feed.is_empty() {
            return Err("recommend grid axes must be nonempty".into());
        }
        if g.rpm.iter().chain(&g.feed).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err("recommend grid values must be positive".into());
        }
    }
    Ok(p)
}

pub struct ScoreFactory;

impl StageFactory for ScoreFactory {
    fn kind(&self) -> &'static str {
        "score"
    }

    fn ports(&self, params: &Value) -> Result<PortSpec, String> {
        check(params)?;
        Ok(PortSpec {
            inputs: vec![("in".into(), RecordType::Features)],
            outputs: vec![
                ("out".into(), OutType::Fixed(RecordType::Scored)),
                ("dead".into(), OutType::Fixed(RecordType::Features)),
            ],
        })
    }

    fn build(&self, id: &str, params: &Value, ctx: &BuildContext) -> Result<Box<dyn Stage>, String> {
        let p = check(params)?;
        let path = ctx.resolve(&p.model_path);
        let model = load_model(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Box::new(Score {
            id: id.to_owned(),
            model,
            grid: p.recommend.map(|g| grid(&g.rpm, &g.feed)).unwrap_or_default(),
            base: ctx.base_dir.clone(),
        }))
    }
}

/// Context features with the machine parameters replaced by a candidate.
pub fn with_candidate(ctx: &FeatureMap, c: Candidate) -> FeatureMap {
    let mut f = ctx.clone();
    f.insert(RPM_FEATURE.into(), c.spindle_rpm);
    f.insert(FEED_FEATURE.into(), c.feed_mm_s);
    f.insert(CHIP_LOAD_FEATURE.into(), c.feed_mm_s / (c.spindle_rpm / 1000.0));
    f
}

/// Appends `risk`, `risk_alarm` and the model version. Records the model
/// cannot score go to the `dead` port.
struct Score {
    id: String,
    model: QualityModel,
    grid: Vec<Candidate>,
    base: PathBuf,
}

impl Stage for Score {
    fn on_record(&mut self, _port: usize, mut rec: WireRecord, out: &mut Outbox) {
        let risk = match predict_risk(&self.model, &rec.values) {
            Ok(r) => r,
            Err(e) => {
                if !matches!(e, QualityError::MissingFeature(_)) {
                    log::warn!("{}: scoring failed: {e}", self.id);
                }
                rec.tags.insert("dead_reason".into(), e.to_string());
                out.dead_letter(rec.weight);
                rec.weight = 0;
                out.emit(1, rec);
                return;
            }
        };
        let alarm = risk >= self.model.threshold;
        if alarm && !self.grid.is_empty() {
            match recommend_parameters(&self.model, &rec.values, &self.grid, with_candidate) {
                Ok(Some(r)) => {
                    rec.values.insert("rec_spindle_rpm".into(), r.candidate.spindle_rpm);
                    rec.values.insert("rec_feed_mm_s".into(), r.candidate.feed_mm_s);
                    rec.values.insert("rec_risk".into(), r.risk);
                }
                Ok(None) => {}
                Err(e) => log::warn!("{}: recommendation failed: {e}", self.id),
            }
        }
        rec.values.insert("risk".into(), risk);
        rec.values.insert("risk_alarm".into(), if alarm { 1.0 } else { 0.0 });
        rec.tags.insert("model_version".into(), self.model.version.clone());
        out.emit(0, rec);
    }

    fn control(&mut self, c: &Control) -> ControlReply {
        match c {
            Control::ActiveModel => ControlReply::Model(self.model.version.clone()),
            Control::ReloadModel(path) => {
                let path = if path.is_absolute() { path.clone() } else { self.base.join(path) };
                match load_model(&path) {
                    Ok(m) => {
                        log::info!("{}: model {} -> {}", self.id, self.model.version, m.version);
                        self.model = m;
                        ControlReply::Model(self.model.version.clone())
                    }
                    Err(e) => {
                        log::error!("{}: keeping model {}: {e}", self.id, self.model.version);
                        ControlReply::Error(e.to_string())
                    }
                }
            }
        }
    }

    fn describe(&self) -> Value {
        serde_json::json!({ "model_version": self.model.version })
    }
}
