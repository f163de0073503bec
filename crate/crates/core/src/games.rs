//! Nonlocal games: a referee draws questions from `μ`, players answer
//! without communicating, and a predicate `V(a|o)` decides the round.

use std::collections::BTreeSet;
use std::fmt;

use num_complex::Complex;
use rand::Rng;

use crate::cmatrix::CMat;
use crate::error::{Error, Result};
use crate::policies::{EntangledPolicy, FactorizedPolicy, FiniteHistorySpace, JointPolicy};
use crate::quantum::{joint_index, joint_outcome, DensityMatrix, Povm};
use crate::rng::sample_categorical;
use crate::scalar::Real;

/// Largest number of partial profiles [`classical_optimum`] will enumerate.
pub const CLASSICAL_ENUMERATION_BUDGET: u128 = 50_000_000;

/// Names accepted by [`NonlocalGame::by_name`].
pub const GAME_NAMES: [&str; 4] = ["chsh", "ghz", "rendezvous-tetra", "rendezvous-cube"];

/// Undirected simple graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSpec {
    adjacency: Vec<BTreeSet<usize>>,
}

impl GraphSpec {
    pub fn from_edges(vertices: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adjacency = vec![BTreeSet::new(); vertices];
        for &(u, v) in edges {
            if u >= vertices || v >= vertices {
                return Err(Error::Shape(format!(
                    "edge ({u}, {v}) outside {vertices} vertices"
                )));
            }
            if u == v {
                return Err(Error::Shape(format!("self-loop at vertex {u}")));
            }
            adjacency[u].insert(v);
            adjacency[v].insert(u);
        }
        if let Some(v) = adjacency.iter().position(BTreeSet::is_empty) {
            return Err(Error::Shape(format!("vertex {v} is isolated")));
        }
        Ok(Self { adjacency })
    }

    /// Complete graph `K_n`; `complete(4)` is the tetrahedron.
    pub fn complete(n: usize) -> Self {
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .collect();
        Self::from_edges(n, &edges).expect("complete graph with n >= 2")
    }

    /// Hypercube `Q_k`; `hypercube(3)` is the cube.
    pub fn hypercube(k: u32) -> Self {
        let n = 1usize << k;
        let edges: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (0..k).map(move |b| (u, u ^ (1 << b))))
            .filter(|(u, v)| u < v)
            .collect();
        Self::from_edges(n, &edges).expect("hypercube with k >= 1")
    }

    /// One `u v` pair per line, 0-indexed; blank lines and `#` comments are
    /// ignored. The vertex count is one more than the largest index.
    pub fn parse_edge_list(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse = |s: Option<&str>| -> Result<usize> {
                s.and_then(|t| t.parse().ok()).ok_or_else(|| Error::Parse {
                    line: lineno + 1,
                    message: format!("expected `u v`, got `{line}`"),
                })
            };
            let mut it = line.split_whitespace();
            let (u, v) = (parse(it.next())?, parse(it.next())?);
            if it.next().is_some() {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: "trailing tokens".into(),
                });
            }
            edges.push((u, v));
        }
        let n = edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0);
        Self::from_edges(n, &edges)
    }

    pub fn vertices(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[v].iter().copied()
    }

    pub fn is_edge(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].contains(&v)
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(BTreeSet::len).sum::<usize>() / 2
    }
}

/// A finite nonlocal game with tabulated `μ` and `V`.
#[derive(Clone, PartialEq)]
pub struct NonlocalGame {
    name: String,
    space: FiniteHistorySpace,
    /// `μ` over flattened joint questions.
    mu: Vec<f64>,
    /// `V` at `[question * num_joint_answers + answer]`.
    predicate: Vec<bool>,
}

impl fmt::Debug for NonlocalGame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlocalGame")
            .field("name", &self.name)
            .field("questions", &self.space.histories())
            .field("answers", &self.space.actions())
            .finish()
    }
}

impl NonlocalGame {
    /// Tabulates `predicate(o, a)` over all joint questions and answers.
    pub fn new(
        name: impl Into<String>,
        questions: Vec<usize>,
        answers: Vec<usize>,
        mu: Vec<f64>,
        predicate: impl Fn(&[usize], &[usize]) -> bool,
    ) -> Result<Self> {
        let space = FiniteHistorySpace::new(questions, answers)?;
        if mu.len() != space.num_joint_histories() {
            return Err(Error::Shape("μ needs one entry per joint question".into()));
        }
        let total: f64 = mu.iter().sum();
        if mu.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Shape("μ is not a distribution".into()));
        }
        let na = space.num_joint_actions();
        let mut table = Vec::with_capacity(mu.len() * na);
        for o in 0..mu.len() {
            let oq = space.history(o);
            for a in 0..na {
                table.push(predicate(&oq, &space.action(a)));
            }
        }
        Ok(Self {
            name: name.into(),
            space,
            mu,
            predicate: table,
        })
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "chsh" => Ok(make_chsh()),
            "ghz" => Ok(make_ghz()),
            "rendezvous-tetra" => Ok(make_rendezvous("rendezvous-tetra", &GraphSpec::complete(4))),
            "rendezvous-cube" => Ok(make_rendezvous("rendezvous-cube", &GraphSpec::hypercube(3))),
            other => Err(Error::UnknownGame(other.to_string())),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn players(&self) -> usize {
        self.space.agents()
    }

    /// Questions are histories, answers are actions.
    pub fn space(&self) -> &FiniteHistorySpace {
        &self.space
    }

    pub fn mu(&self, o: &[usize]) -> f64 {
        self.mu[self.space.history_index(o)]
    }

    pub fn mu_table(&self) -> &[f64] {
        &self.mu
    }

    pub fn wins(&self, o: &[usize], a: &[usize]) -> bool {
        self.wins_flat(self.space.history_index(o), self.space.action_index(a))
    }

    #[inline]
    pub fn wins_flat(&self, o: usize, a: usize) -> bool {
        self.predicate[o * self.space.num_joint_actions() + a]
    }
}

/// `a ⊕ b = x ∧ y` with uniform questions.
pub fn make_chsh() -> NonlocalGame {
    NonlocalGame::new("chsh", vec![2, 2], vec![2, 2], vec![0.25; 4], |o, a| {
        (a[0] ^ a[1]) == (o[0] & o[1])
    })
    .expect("valid CHSH definition")
}

/// Three players, questions uniform over {000, 110, 101, 011}, win iff
/// `x ∨ y ∨ z = a + b + c mod 2`.
pub fn make_ghz() -> NonlocalGame {
    let mut mu = vec![0.0; 8];
    for o in [[0, 0, 0], [1, 1, 0], [1, 0, 1], [0, 1, 1]] {
        mu[joint_index(&o, &[2, 2, 2])] = 0.25;
    }
    NonlocalGame::new("ghz", vec![2; 3], vec![2; 3], mu, |o, a| {
        (o[0] | o[1] | o[2]) == (a[0] + a[1] + a[2]) % 2
    })
    .expect("valid GHZ definition")
}

/// Two players start on independent uniform vertices, each moves once along
/// an edge, and they win iff they land on the same vertex. Answers name the
/// destination vertex; a destination that is not a neighbor loses.
pub fn make_rendezvous(name: &str, graph: &GraphSpec) -> NonlocalGame {
    let n = graph.vertices();
    let mu = vec![1.0 / (n * n) as f64; n * n];
    NonlocalGame::new(name, vec![n, n], vec![n, n], mu, |o, a| {
        a[0] == a[1] && graph.is_edge(o[0], a[0]) && graph.is_edge(o[1], a[1])
    })
    .expect("valid rendezvous definition")
}

/// Published upper bounds on the entangled win probability used to
/// normalize learned advantages.
pub fn quantum_bound(name: &str) -> Option<f64> {
    match name {
        "chsh" => Some((std::f64::consts::PI / 8.0).cos().powi(2)),
        "ghz" => Some(1.0),
        "rendezvous-tetra" => Some(0.64506),
        "rendezvous-cube" => Some(0.32253),
        _ => None,
    }
}

/// Outcome of one refereed round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Round {
    pub questions: Vec<usize>,
    pub answers: Vec<usize>,
    pub verdict: u8,
}

/// Black-box access to a game: players see their questions and the verdict,
/// never `μ` or `V` themselves.
pub struct Referee<'g> {
    game: &'g NonlocalGame,
}

impl<'g> Referee<'g> {
    pub fn new(game: &'g NonlocalGame) -> Self {
        Self { game }
    }

    pub fn space(&self) -> &FiniteHistorySpace {
        self.game.space()
    }

    pub fn play_round<T: Real>(
        &self,
        policy: &dyn JointPolicy<T>,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Round> {
        let o = sample_categorical(&self.game.mu, rng);
        let questions = self.game.space.history(o);
        let answers = policy.sample_action(&questions, rng)?.actions;
        let verdict = u8::from(
            self.game
                .wins_flat(o, self.game.space.action_index(&answers)),
        );
        Ok(Round {
            questions,
            answers,
            verdict,
        })
    }

    /// Plays `n` rounds, returning the questions, the answers' flat index and
    /// the verdict for each.
    pub fn play_batch<T: Real, R: Rng>(
        &self,
        policy: &dyn JointPolicy<T>,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Round>> {
        (0..n).map(|_| self.play_round(policy, rng)).collect()
    }
}

/// `Σ_o μ(o) Σ_a π(a|o) V(a|o)`.
pub fn exact_win_probability<T: Real>(
    game: &NonlocalGame,
    policy: &dyn JointPolicy<T>,
) -> Result<f64> {
    if policy.space() != game.space() {
        return Err(Error::Shape(
            "policy alphabets do not match the game".into(),
        ));
    }
    let na = game.space.num_joint_actions();
    let mut total = 0.0;
    for (o, &mu) in game.mu.iter().enumerate() {
        if mu == 0.0 {
            continue;
        }
        let dist = policy.joint_distribution(&game.space.history(o))?;
        let won: f64 = (0..na)
            .filter(|&a| game.wins_flat(o, a))
            .map(|a| dist[a].as_f64())
            .sum();
        total += mu * won;
    }
    Ok(total)
}

/// Best deterministic factorized strategy: `profile[i][oᵢ]` is player `i`'s
/// answer to question `oᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicalOptimum {
    pub value: f64,
    pub profile: Vec<Vec<usize>>,
}

impl ClassicalOptimum {
    pub fn policy(&self, game: &NonlocalGame) -> Result<FactorizedPolicy<f64>> {
        FactorizedPolicy::deterministic(game.space().clone(), &self.profile)
    }
}

/// Answers of player `i` to question `q` that win in at least one reachable
/// situation. Other answers can be replaced by any of these without loss.
fn useful_answers(game: &NonlocalGame, i: usize, q: usize) -> Vec<usize> {
    let space = &game.space;
    let mut useful = BTreeSet::new();
    for (o, &mu) in game.mu.iter().enumerate() {
        if mu == 0.0 || space.history(o)[i] != q {
            continue;
        }
        for a in 0..space.num_joint_actions() {
            if game.wins_flat(o, a) {
                useful.insert(space.action(a)[i]);
            }
        }
    }
    if useful.is_empty() {
        useful.insert(0);
    }
    useful.into_iter().collect()
}

/// Maximum win probability over deterministic factorized strategies, which
/// is also the shared-randomness optimum. All players but the last are
/// enumerated; the last one best-responds question by question.
pub fn classical_optimum(game: &NonlocalGame) -> Result<ClassicalOptimum> {
    let space = &game.space;
    let n = space.agents();
    let last = n - 1;
    let choices: Vec<Vec<Vec<usize>>> = (0..n)
        .map(|i| {
            (0..space.histories()[i])
                .map(|q| useful_answers(game, i, q))
                .collect()
        })
        .collect();
    // Mixed radix over (player, question) slots of the enumerated players.
    let radices: Vec<usize> = choices[..last].iter().flatten().map(Vec::len).collect();
    let needed: u128 = radices.iter().map(|&r| r as u128).product();
    if needed > CLASSICAL_ENUMERATION_BUDGET {
        return Err(Error::BudgetExceeded {
            needed,
            budget: CLASSICAL_ENUMERATION_BUDGET,
        });
    }
    let offsets: Vec<usize> = (0..last)
        .scan(0, |acc, i| {
            let o = *acc;
            *acc += space.histories()[i];
            Some(o)
        })
        .collect();
    let questions: Vec<(Vec<usize>, f64)> = game
        .mu
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > 0.0)
        .map(|(o, &m)| (space.history(o), m))
        .collect();

    let mut best = ClassicalOptimum {
        value: -1.0,
        profile: Vec::new(),
    };
    let mut digits = vec![0usize; radices.len()];
    let mut answers = vec![0usize; n];
    for _ in 0..needed {
        let mut value = 0.0;
        let mut response = vec![0usize; space.histories()[last]];
        for q_last in 0..space.histories()[last] {
            let mut best_here = (f64::NEG_INFINITY, 0);
            for &a_last in &choices[last][q_last] {
                let mut v = 0.0;
                for (o, m) in &questions {
                    if o[last] != q_last {
                        continue;
                    }
                    for i in 0..last {
                        let slot = offsets[i] + o[i];
                        answers[i] = choices[i][o[i]][digits[slot]];
                    }
                    answers[last] = a_last;
                    if game.wins(o, &answers) {
                        v += m;
                    }
                }
                if v > best_here.0 {
                    best_here = (v, a_last);
                }
            }
            value += best_here.0;
            response[q_last] = best_here.1;
        }
        if value > best.value {
            let mut profile: Vec<Vec<usize>> = (0..last)
                .map(|i| {
                    (0..space.histories()[i])
                        .map(|q| choices[i][q][digits[offsets[i] + q]])
                        .collect()
                })
                .collect();
            profile.push(response);
            best = ClassicalOptimum { value, profile };
        }
        // Advance the odometer.
        for (d, &r) in digits.iter_mut().zip(&radices).rev() {
            *d += 1;
            if *d < r {
                break;
            }
            *d = 0;
        }
    }
    Ok(best)
}

/// The textbook entangled CHSH strategy: a Bell pair, Alice measuring in
/// the Z and X bases, Bob in bases rotated by `±π/8`. It wins with
/// probability `cos²(π/8)`.
pub fn chsh_quantum_policy<T: Real>() -> EntangledPolicy<T> {
    let re = |x: f64| Complex::new(T::lit(x), T::zero());
    let mat = |rows: [[f64; 2]; 2]| CMat::from_fn(2, |i, j| re(rows[i][j]));
    let th = std::f64::consts::PI / 8.0;
    let (c, s) = (th.cos(), th.sin());
    let povm = |a: [[f64; 2]; 2], b: [[f64; 2]; 2]| {
        Povm::new(vec![mat(a), mat(b)]).expect("valid CHSH measurement")
    };
    let alice = vec![
        povm([[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]),
        povm([[0.5, 0.5], [0.5, 0.5]], [[0.5, -0.5], [-0.5, 0.5]]),
    ];
    let bob = vec![
        povm(
            [[c * c, s * c], [s * c, s * s]],
            [[s * s, -s * c], [-s * c, c * c]],
        ),
        povm(
            [[c * c, -s * c], [-s * c, s * s]],
            [[s * s, s * c], [s * c, c * c]],
        ),
    ];
    let space = FiniteHistorySpace::new(vec![2, 2], vec![2, 2]).expect("CHSH alphabets");
    EntangledPolicy::new(space, DensityMatrix::bell(), vec![alice, bob])
        .expect("consistent CHSH policy")
}

/// Flat index helpers re-exported for callers that tabulate by question.
pub fn question_index(game: &NonlocalGame, o: &[usize]) -> usize {
    joint_index(o, game.space().histories())
}

pub fn question(game: &NonlocalGame, index: usize) -> Vec<usize> {
    joint_outcome(index, game.space().histories())
}
