use serde::{Deserialize, Serialize};

use crate::model::{predict_risk, QualityModel};
use crate::{FeatureMap, QualityError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub spindle_rpm: f64,
    pub feed_mm_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub candidate: Candidate,
    pub risk: f64,
}

/// Scores every grid candidate and returns the one with the lowest predicted
/// risk. Ties go to the lower feed, then the lower spindle speed.
pub fn recommend_parameters<P>(
    model: &QualityModel,
    context: &FeatureMap,
    grid: &[Candidate],
    predictor: P,
) -> Result<Option<Recommendation>, QualityError>
where
    P: Fn(&FeatureMap, Candidate) -> FeatureMap,
{
    let mut best: Option<Recommendation> = None;
    for &c in grid {
        let risk = predict_risk(model, &predictor(context, c))?;
        let better = match &best {
            None => true,
            Some(b) => risk
                .total_cmp(&b.risk)
                .then(c.feed_mm_s.total_cmp(&b.candidate.feed_mm_s))
                .then(c.spindle_rpm.total_cmp(&b.candidate.spindle_rpm))
                .is_lt(),
        };
        if better {
            best = Some(Recommendation { candidate: c, risk });
        }
    }
    Ok(best)
}

/// Cartesian product of the given axes, feed-major.
pub fn grid(rpms: &[f64], feeds: &[f64]) -> Vec<Candidate> {
    feeds
        .iter()
        .flat_map(|&f| {
            rpms.iter().map(move |&r| Candidate {
                spindle_rpm: r,
                feed_mm_s: f,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> QualityModel {
        QualityModel {
            version: "t".into(),
            feature_names: vec!["feed".into(), "load".into()],
            mu: vec![0.0, 0.0],
            sigma: vec![1.0, 1.0],
            w: vec![0.2, 1.5],
            b: -1.0,
            threshold: 0.7,
            trained_on: String::new(),
            created_at: String::new(),
        }
    }

    fn surrogate(_: &FeatureMap, c: Candidate) -> FeatureMap {
        [
            ("feed".to_string(), c.feed_mm_s),
            ("load".to_string(), c.feed_mm_s / (c.spindle_rpm / 1000.0)),
        ]
        .into_iter()
        .collect()
    }

    #[test]
    fn single_candidate_wins() {
        let g = [Candidate { spindle_rpm: 9000.0, feed_mm_s: 10.0 }];
        let r = recommend_parameters(&model(), &FeatureMap::new(), &g, surrogate)
            .unwrap()
            .unwrap();
        assert_eq!(r.candidate, g[0]);
    }

    #[test]
    fn ties_prefer_lower_feed_then_lower_rpm() {
        let flat = |_: &FeatureMap, _: Candidate| -> FeatureMap {
            [("feed".to_string(), 0.0), ("load".to_string(), 0.0)].into_iter().collect()
        };
        let g = grid(&[12000.0, 6000.0], &[20.0, 5.0]);
        let r = recommend_parameters(&model(), &FeatureMap::new(), &g, flat)
            .unwrap()
            .unwrap();
        assert_eq!(r.candidate, Candidate { spindle_rpm: 6000.0, feed_mm_s: 5.0 });
    }

    #[test]
    fn grid_search_equals_brute_force_in_any_order() {
        let rpms = [3000.0, 6000.0, 12000.0, 18000.0, 24000.0];
        let feeds = [1.0, 5.0, 10.0, 20.0, 40.0];
        let m = model();
        let mut g = grid(&rpms, &feeds);
        let mut brute: Vec<(f64, f64, f64)> = g
            .iter()
            .map(|c| (predict_risk(&m, &surrogate(&FeatureMap::new(), *c)).unwrap(), c.feed_mm_s, c.spindle_rpm))
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.total_cmp(&b.2)));
        for rot in 0..g.len() {
            g.rotate_left(rot.min(1));
            if rot % 2 == 1 {
                g.reverse();
            }
            let r = recommend_parameters(&m, &FeatureMap::new(), &g, surrogate).unwrap().unwrap();
            assert_eq!((r.risk, r.candidate.feed_mm_s, r.candidate.spindle_rpm), brute[0]);
        }
    }
}
