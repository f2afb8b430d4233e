//! WebAssembly bindings behind `www/index.html`.
//!
//! Every export takes and returns plain numbers and JSON strings, so the same
//! functions run natively in tests.

use effzero::config::{Profile, RunConfig};
use effzero::env::{BuiltinEnv, DeepSea, Environment, Observation};
use effzero::mcts::{search_trees, EnvModel, NoiseMode, SearchConfig};
use effzero::model::{codec, Support};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Collapses the channel planes into one grid: 0 empty, `c + 1` where plane
/// `c` is lit (later planes win).
fn grid(obs: &Observation) -> Vec<Vec<u8>> {
    let [c, h, w] = obs.shape;
    let mut out = vec![vec![0u8; w]; h];
    for ch in 0..c {
        for (r, row) in out.iter_mut().enumerate() {
            for (col, cell) in row.iter_mut().enumerate() {
                if obs.pixels[(ch * h + r) * w + col] > 0.5 {
                    *cell = ch as u8 + 1;
                }
            }
        }
    }
    out
}

/// A built-in environment played by hand.
#[wasm_bindgen]
pub struct Game {
    env: BuiltinEnv,
    grid: Vec<Vec<u8>>,
    episode_return: f64,
    done: bool,
}

#[wasm_bindgen]
impl Game {
    #[wasm_bindgen(constructor)]
    pub fn new(name: &str, size: u32, seed: u32) -> Result<Game, String> {
        let mut env = BuiltinEnv::create(name, size as usize, seed as u64).map_err(|e| e.to_string())?;
        let obs = env.reset().map_err(|e| e.to_string())?;
        Ok(Game {
            grid: grid(&obs),
            env,
            episode_return: 0.0,
            done: false,
        })
    }

    pub fn num_actions(&self) -> u32 {
        self.env.num_actions() as u32
    }

    pub fn reset(&mut self) -> Result<String, String> {
        let obs = self.env.reset().map_err(|e| e.to_string())?;
        self.grid = grid(&obs);
        self.episode_return = 0.0;
        self.done = false;
        Ok(self.view(0.0))
    }

    /// Applies `action`; stepping a finished episode starts a new one.
    pub fn step(&mut self, action: u32) -> Result<String, String> {
        if self.done {
            return self.reset();
        }
        let r = self.env.step(action as usize).map_err(|e| e.to_string())?;
        self.grid = grid(&r.observation);
        self.episode_return += r.reward;
        self.done = r.done;
        Ok(self.view(r.reward))
    }

    /// Current frame as `{grid, reward, return, done}`.
    pub fn state(&self) -> String {
        self.view(0.0)
    }

    fn view(&self, reward: f64) -> String {
        json!({
            "grid": self.grid,
            "reward": reward,
            "return": self.episode_return,
            "done": self.done,
        })
        .to_string()
    }
}

/// Runs the search with the true DeepSea dynamics from cell `(row, col)`.
///
/// Returns visit counts, the visit policy, the root value, the chosen action
/// and the optimal action found by exhaustive lookahead.
#[wasm_bindgen]
pub fn search_deepsea(size: u32, row: u32, col: u32, simulations: u32) -> Result<String, String> {
    let (size, row, col) = (size as usize, row as usize, col as usize);
    if size < 2 || row >= size || col > row {
        return Err(format!("need 0 ≤ col ≤ row < size, got row {row}, col {col}, size {size}"));
    }
    let cfg = RunConfig::for_profile(Profile::Toy);
    let search = SearchConfig {
        num_simulations: simulations.max(1) as usize,
        ..SearchConfig::from_run(&cfg)
    };
    let mut env = DeepSea::new(size);
    env.reset().map_err(|e| e.to_string())?;
    env.set_position(row, col);
    let model = EnvModel::<DeepSea>::with_rollouts(search.discount);
    let trees = search_trees(&model, &[model.root(&env, 0)], &search, NoiseMode::Eval).map_err(|e| e.to_string())?;
    let res = trees[0].result();
    Ok(json!({
        "visit_counts": res.visit_counts,
        "policy": res.policy,
        "root_value": res.root_value,
        "best_action": res.best_action,
        "optimal_action": optimal_action(&env, search.discount),
    })
    .to_string())
}

fn optimal_action(env: &DeepSea, gamma: f64) -> usize {
    fn q(env: &DeepSea, a: usize, gamma: f64) -> f64 {
        let mut e = env.clone();
        let s = e.step(a).expect("valid action");
        s.reward + if s.done { 0.0 } else { gamma * q(&e, 0, gamma).max(q(&e, 1, gamma)) }
    }
    usize::from(q(env, 1, gamma) > q(env, 0, gamma))
}

/// Two-hot encoding of `x` on `bins` atoms spanning `±half_width` in the
/// transformed space, with the decoded value.
#[wasm_bindgen]
pub fn encode_value(x: f64, half_width: f64, bins: u32) -> Result<String, String> {
    if bins < 2 || half_width <= 0.0 || !x.is_finite() {
        return Err("need bins ≥ 2, half_width > 0 and a finite value".into());
    }
    let support = Support::new(half_width, bins as usize);
    let (probs, clipped) = support.encode(x);
    let step = 2.0 * half_width / (bins - 1) as f64;
    let atoms: Vec<f64> = (0..bins).map(|i| -half_width + i as f64 * step).collect();
    let v: Value = json!({
        "transformed": codec::transform(x),
        "atoms": atoms,
        "probs": probs,
        "clipped": clipped,
        "decoded": support.decode(&probs),
    });
    Ok(v.to_string())
}
