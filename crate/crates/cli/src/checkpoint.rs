//! One JSON schema for every policy kind: named real arrays (complex
//! matrices interleave real and imaginary parts), a config snapshot, the
//! seed and the training step.

use std::collections::BTreeMap;
use std::path::Path;

use qcoord::policies::{EntangledParams, EntangledPolicy, FiniteHistorySpace, StateParams};
use qcoord::quantum::{DensityFactor, DensityMatrix, Povm, PovmLogits};
use qcoord::CMat;
use qcoord_queueing::coordinator::{
    Actors, Coordinator, QuantumCoordinator, RouterPolicy, SharedCoordinator,
};
use qcoord_queueing::nn::Mlp;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{CliError, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const KIND_ENTANGLED_PARAMS: &str = "entangled-params";
pub const KIND_ENTANGLED_POLICY: &str = "entangled-policy";
pub const KIND_ROUTER: &str = "router-policy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: String,
    pub arrays: BTreeMap<String, NamedArray>,
    pub config: Value,
    pub seed: u64,
    pub step: u64,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(format!("checkpoint: {}", msg.into()))
}

fn complex_array(m: &CMat<f64>) -> NamedArray {
    NamedArray {
        shape: vec![m.dim(), m.dim(), 2],
        values: m.to_interleaved(),
    }
}

fn stacked(ms: &[CMat<f64>]) -> NamedArray {
    let d = ms.first().map_or(0, CMat::dim);
    NamedArray {
        shape: vec![ms.len(), d, d, 2],
        values: ms.iter().flat_map(CMat::to_interleaved).collect(),
    }
}

fn real_array(values: &[f64]) -> NamedArray {
    NamedArray {
        shape: vec![values.len()],
        values: values.to_vec(),
    }
}

fn space_json(space: &FiniteHistorySpace) -> Value {
    json!({ "histories": space.histories(), "actions": space.actions() })
}

fn mlp_arrays(prefix: &str, net: &Mlp, arrays: &mut BTreeMap<String, NamedArray>) {
    for (l, (w, b)) in net.weights().iter().zip(net.biases()).enumerate() {
        let (n_in, n_out) = (net.sizes()[l], net.sizes()[l + 1]);
        arrays.insert(
            format!("{prefix}.w{l}"),
            NamedArray {
                shape: vec![n_out, n_in],
                values: w.clone(),
            },
        );
        arrays.insert(format!("{prefix}.b{l}"), real_array(b));
    }
}

impl Checkpoint {
    fn new(
        kind: &str,
        arrays: BTreeMap<String, NamedArray>,
        config: Value,
        seed: u64,
        step: u64,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            arrays,
            config,
            seed,
            step,
        }
    }

    /// Trainable game parameters. `config` should identify the game.
    pub fn from_entangled_params(
        params: &EntangledParams<f64>,
        mut config: Value,
        seed: u64,
        step: u64,
    ) -> Self {
        let mut arrays = BTreeMap::new();
        let state = match &params.state {
            StateParams::Learned(f) => {
                arrays.insert("state.factor".to_string(), complex_array(f.factor()));
                "learned"
            }
            StateParams::Fixed(r) => {
                arrays.insert("state.rho".to_string(), complex_array(r.matrix()));
                "fixed"
            }
        };
        for (i, table) in params.logits.iter().enumerate() {
            for (h, z) in table.iter().enumerate() {
                arrays.insert(format!("logits.{i}.{h}"), stacked(z.matrices()));
            }
        }
        if let Value::Object(map) = &mut config {
            map.insert("space".into(), space_json(params.space()));
            map.insert("state".into(), json!(state));
        }
        Self::new(KIND_ENTANGLED_PARAMS, arrays, config, seed, step)
    }

    /// A fixed entangled policy: state and POVM elements.
    pub fn from_entangled_policy(policy: &EntangledPolicy<f64>, mut config: Value) -> Self {
        use qcoord::policies::JointPolicy;
        let mut arrays = BTreeMap::new();
        arrays.insert("rho".to_string(), complex_array(policy.rho().matrix()));
        for (i, table) in policy.povms().iter().enumerate() {
            for (h, p) in table.iter().enumerate() {
                arrays.insert(format!("povm.{i}.{h}"), stacked(p.elements()));
            }
        }
        if let Value::Object(map) = &mut config {
            map.insert("space".into(), space_json(policy.space()));
        }
        Self::new(KIND_ENTANGLED_POLICY, arrays, config, 0, 0)
    }

    pub fn from_router(policy: &RouterPolicy, mut config: Value, seed: u64, step: u64) -> Self {
        let mut arrays = BTreeMap::new();
        let coordinator = match &policy.coordinator {
            Coordinator::Quantum(q) => {
                arrays.insert("coordinator.rho".to_string(), complex_array(q.rho.matrix()));
                arrays.insert(
                    "coordinator.logit_scale".to_string(),
                    real_array(&q.logit_scale),
                );
                for (i, net) in q.nets.iter().enumerate() {
                    mlp_arrays(&format!("coordinator.net{i}"), net, &mut arrays);
                }
                "quantum"
            }
            Coordinator::Shared(s) => {
                arrays.insert("coordinator.logits".to_string(), real_array(&s.logits));
                "shared"
            }
        };
        let actors = match &policy.actors {
            Actors::Trivial => "trivial",
            Actors::Learned { nets } => {
                for (i, net) in nets.iter().enumerate() {
                    mlp_arrays(&format!("actor{i}"), net, &mut arrays);
                }
                "learned"
            }
        };
        if let Value::Object(map) = &mut config {
            map.insert("coordinator".into(), json!(coordinator));
            map.insert("actors".into(), json!(actors));
        }
        Self::new(KIND_ROUTER, arrays, config, seed, step)
    }

    pub fn to_json(&self) -> Result<String> {
        for (name, a) in &self.arrays {
            if a.values.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Divergence(format!(
                    "array `{name}` has non-finite values"
                )));
            }
        }
        serde_json::to_string_pretty(self).map_err(|e| bad(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        if c.schema_version != SCHEMA_VERSION {
            return Err(bad(format!(
                "unsupported schema version {}",
                c.schema_version
            )));
        }
        for (name, a) in &c.arrays {
            if a.shape.iter().product::<usize>() != a.values.len() {
                return Err(bad(format!(
                    "array `{name}` has {} values for shape {:?}",
                    a.values.len(),
                    a.shape
                )));
            }
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .get(name)
            .ok_or_else(|| bad(format!("missing array `{name}`")))
    }

    fn matrix(&self, name: &str) -> Result<CMat<f64>> {
        let a = self.array(name)?;
        match a.shape[..] {
            [d, d2, 2] if d == d2 => Ok(CMat::from_interleaved(d, &a.values)?),
            _ => Err(bad(format!("`{name}` is not a square complex matrix"))),
        }
    }

    fn matrices(&self, name: &str) -> Result<Vec<CMat<f64>>> {
        let a = self.array(name)?;
        match a.shape[..] {
            [m, d, d2, 2] if d == d2 => (0..m)
                .map(|k| {
                    Ok(CMat::from_interleaved(
                        d,
                        &a.values[k * 2 * d * d..(k + 1) * 2 * d * d],
                    )?)
                })
                .collect(),
            _ => Err(bad(format!(
                "`{name}` is not a stack of square complex matrices"
            ))),
        }
    }

    fn space(&self) -> Result<FiniteHistorySpace> {
        let s = &self.config["space"];
        let list = |key: &str| -> Result<Vec<usize>> {
            serde_json::from_value(s[key].clone())
                .map_err(|_| bad(format!("config.space.{key} missing")))
        };
        Ok(FiniteHistorySpace::new(
            list("histories")?,
            list("actions")?,
        )?)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(bad(format!(
                "expected kind `{kind}`, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_entangled_params(&self) -> Result<EntangledParams<f64>> {
        self.expect_kind(KIND_ENTANGLED_PARAMS)?;
        let space = self.space()?;
        let state = if self.arrays.contains_key("state.factor") {
            StateParams::Learned(DensityFactor::new(self.matrix("state.factor")?)?)
        } else {
            StateParams::Fixed(DensityMatrix::new(self.matrix("state.rho")?)?)
        };
        let logits = (0..space.agents())
            .map(|i| {
                (0..space.histories()[i])
                    .map(|h| Ok(PovmLogits::new(self.matrices(&format!("logits.{i}.{h}"))?)?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EntangledParams::new(space, state, logits)?)
    }

    /// The realized policy of either entangled kind.
    pub fn to_entangled_policy(&self) -> Result<EntangledPolicy<f64>> {
        if self.kind == KIND_ENTANGLED_PARAMS {
            return Ok(self.to_entangled_params()?.realize()?.policy);
        }
        self.expect_kind(KIND_ENTANGLED_POLICY)?;
        let space = self.space()?;
        let rho = DensityMatrix::new(self.matrix("rho")?)?;
        let povms = (0..space.agents())
            .map(|i| {
                (0..space.histories()[i])
                    .map(|h| Ok(Povm::new(self.matrices(&format!("povm.{i}.{h}"))?)?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EntangledPolicy::new(space, rho, povms)?)
    }

    fn mlp(&self, prefix: &str) -> Result<Mlp> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut l = 0;
        while self.arrays.contains_key(&format!("{prefix}.w{l}")) {
            weights.push(self.array(&format!("{prefix}.w{l}"))?.values.clone());
            biases.push(self.array(&format!("{prefix}.b{l}"))?.values.clone());
            l += 1;
        }
        Ok(Mlp::from_layers(weights, biases)?)
    }

    pub fn to_router(&self) -> Result<RouterPolicy> {
        self.expect_kind(KIND_ROUTER)?;
        let coordinator = match self.config["coordinator"].as_str() {
            Some("quantum") => {
                let scale = &self.array("coordinator.logit_scale")?.values;
                if scale.len() != 2 {
                    return Err(bad("coordinator.logit_scale needs two entries"));
                }
                Coordinator::Quantum(QuantumCoordinator {
                    rho: DensityMatrix::new(self.matrix("coordinator.rho")?)?,
                    nets: [self.mlp("coordinator.net0")?, self.mlp("coordinator.net1")?],
                    logit_scale: [scale[0], scale[1]],
                })
            }
            Some("shared") => Coordinator::Shared(SharedCoordinator {
                logits: self.array("coordinator.logits")?.values.clone(),
            }),
            _ => return Err(bad("config.coordinator must be `quantum` or `shared`")),
        };
        let actors = match self.config["actors"].as_str() {
            Some("trivial") => Actors::Trivial,
            Some("learned") => Actors::Learned {
                nets: [self.mlp("actor0")?, self.mlp("actor1")?],
            },
            _ => return Err(bad("config.actors must be `trivial` or `learned`")),
        };
        let policy = RouterPolicy {
            coordinator,
            actors,
        };
        policy.validate()?;
        Ok(policy)
    }
}
