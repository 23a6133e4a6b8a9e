//! Browser demo: generate a synthetic deformable pair, train the
//! embedding network live, and visualize the resulting correspondence.
//!
//! All numerics come from the core crate; this layer only shuttles flat
//! arrays and small JSON strings across the wasm boundary for a static
//! page to render.

use wasm_bindgen::prelude::*;

use pointcorr::affinity::SimilarityMode;
use pointcorr::datagen::{gen_pair, BaseShape, SynthConfig};
use pointcorr::feature_net::{init_params, NetworkConfig, NetworkParams};
use pointcorr::geometry::{max_pairwise_distance, normalize, PointCloud};
use pointcorr::losses::LossWeights;
use pointcorr::matcher::{corr_accuracy, corr_error, match_clouds, CorrespondenceMap};
use pointcorr::trainer::{train_step, AdamState, TrainConfig};

fn demo_train_config(n: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 1,
        learning_rate: 0.001,
        epochs: 1,
        n_points: n,
        lr_drop_epochs: vec![],
        network: NetworkConfig {
            edge_widths: vec![8, 16, 32, 64],
            head_widths: vec![120, 32],
            out_dim: 32,
            knn_k: 8,
            ..NetworkConfig::default()
        },
        loss: LossWeights {
            k_cc: 6,
            k_sc: 6,
            k_m: 6,
            ..LossWeights::default()
        },
        ..TrainConfig::default()
    }
}

fn flatten(pc: &PointCloud) -> Vec<f32> {
    pc.points
        .iter()
        .flat_map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
        .collect()
}

/// One generated pair plus the model being trained on it.
#[wasm_bindgen]
pub struct DemoSession {
    source: PointCloud,
    target: PointCloud,
    gt: Vec<u32>,
    cfg: TrainConfig,
    params: NetworkParams,
    opt: AdamState,
    step: u64,
}

#[wasm_bindgen]
impl DemoSession {
    /// Generates a pair on the chosen base shape and initializes a small
    /// model. Shapes: "sphere", "cylinder", "two-lobe".
    #[wasm_bindgen(constructor)]
    pub fn new(
        shape: &str,
        n: usize,
        amplitude: f64,
        frequency: f64,
        noise: f64,
        seed: u32,
    ) -> Result<DemoSession, JsValue> {
        let base_shape = BaseShape::parse(shape)
            .ok_or_else(|| JsValue::from_str("shape must be sphere, cylinder, or two-lobe"))?;
        let synth = SynthConfig {
            base_shape,
            n,
            deform_amplitude: amplitude,
            deform_frequency: frequency,
            noise_sigma: noise,
            seed: seed as u64,
            num_pairs: 1,
            rigid: false,
        };
        let pair = gen_pair(&synth, 0).map_err(|e| JsValue::from_str(&e.to_string()))?;
        let cfg = demo_train_config(n);
        let params = init_params(&cfg.network, seed as u64)
            .map_err(|e| JsValue::from_str(&e.to_string()))?;
        let opt = AdamState::new(&params);
        Ok(DemoSession {
            source: normalize(&pair.source),
            target: normalize(&pair.target),
            gt: pair.gt,
            cfg,
            params,
            opt,
            step: 0,
        })
    }

    pub fn source_points(&self) -> Vec<f32> {
        flatten(&self.source)
    }

    pub fn target_points(&self) -> Vec<f32> {
        flatten(&self.target)
    }

    pub fn ground_truth(&self) -> Vec<u32> {
        self.gt.clone()
    }

    pub fn step_count(&self) -> u32 {
        self.step as u32
    }

    /// Re-initializes model and optimizer, keeping the generated pair.
    pub fn reset_model(&mut self, seed: u32) -> Result<(), JsValue> {
        self.params = init_params(&self.cfg.network, seed as u64)
            .map_err(|e| JsValue::from_str(&e.to_string()))?;
        self.opt = AdamState::new(&self.params);
        self.step = 0;
        Ok(())
    }

    /// Runs training steps on the pair and returns a JSON array of
    /// per-step loss summaries.
    pub fn train_steps(&mut self, steps: u32) -> Result<String, JsValue> {
        let mut rows = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let pairs = [(&self.source, &self.target)];
            let mean = train_step(
                &mut self.params,
                &mut self.opt,
                &pairs,
                self.cfg.learning_rate,
                &self.cfg,
            )
            .map_err(|e| JsValue::from_str(&e.to_string()))?;
            self.step += 1;
            rows.push(format!(
                "{{\"step\":{},\"total\":{:.6},\"cross\":{:.6},\"self\":{:.6},\"map\":{:.6}}}",
                self.step,
                mean.total,
                mean.cc_target + mean.cc_source,
                mean.sc_source + mean.sc_target,
                mean.map_source + mean.map_target
            ));
        }
        Ok(format!("[{}]", rows.join(",")))
    }

    /// Hard correspondence of every source point under the current model.
    pub fn match_points(&self) -> Result<Vec<u32>, JsValue> {
        let map = self.current_map()?;
        Ok(map.target_index)
    }

    /// JSON summary: correspondence error, target diameter, and the
    /// accuracy curve over tolerances 0.01..=0.20.
    pub fn evaluate(&self) -> Result<String, JsValue> {
        let map = self.current_map()?;
        let err = corr_error(&map, &self.target, &self.gt)
            .map_err(|e| JsValue::from_str(&e.to_string()))?;
        let d =
            max_pairwise_distance(&self.target).map_err(|e| JsValue::from_str(&e.to_string()))?;
        let mut curve = Vec::new();
        for i in 1..=20 {
            let eps = i as f64 / 100.0;
            let acc = corr_accuracy(&map, &self.target, &self.gt, eps)
                .map_err(|e| JsValue::from_str(&e.to_string()))?;
            curve.push(format!("[{eps},{acc}]"));
        }
        Ok(format!(
            "{{\"err\":{err},\"d\":{d},\"curve\":[{}]}}",
            curve.join(",")
        ))
    }

    fn current_map(&self) -> Result<CorrespondenceMap, JsValue> {
        match_clouds(
            &self.params,
            &self.source,
            &self.target,
            SimilarityMode::Cosine,
            self.cfg.loss.k_cc,
        )
        .map_err(|e| JsValue::from_str(&e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_session_trains_and_matches() {
        let mut s = DemoSession::new("sphere", 96, 0.1, 2.0, 0.0, 4).unwrap();
        assert_eq!(s.source_points().len(), 96 * 3);
        let log = s.train_steps(2).unwrap();
        assert!(log.starts_with("[{"));
        assert_eq!(s.step_count(), 2);
        let matches = s.match_points().unwrap();
        assert_eq!(matches.len(), 96);
        let eval = s.evaluate().unwrap();
        assert!(eval.contains("\"curve\""));
    }
}
