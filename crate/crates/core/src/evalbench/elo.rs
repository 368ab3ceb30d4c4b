//! Pairwise ELO bookkeeping for transcript comparisons.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INITIAL_RATING: f64 = 1000.0;
pub const K_FACTOR: f64 = 32.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    AWins,
    BWins,
    Draw,
}

impl Outcome {
    /// Score credited to player A.
    pub fn score_a(self) -> f64 {
        match self {
            Outcome::AWins => 1.0,
            Outcome::BWins => 0.0,
            Outcome::Draw => 0.5,
        }
    }
}

/// One game as read from or written to the game log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Game {
    pub a: String,
    pub b: String,
    pub outcome: Outcome,
}

/// Logged game with the ratings after the update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameRecord {
    pub a: String,
    pub b: String,
    pub outcome: Outcome,
    pub rating_a: f64,
    pub rating_b: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EloTable {
    pub ratings: BTreeMap<String, f64>,
    pub log: Vec<GameRecord>,
}

/// Logistic expected score of a player rated `ra` against `rb`.
pub fn expected(ra: f64, rb: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((rb - ra) / 400.0))
}

impl EloTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn rating(&self, player: &str) -> f64 {
        self.ratings.get(player).copied().unwrap_or(INITIAL_RATING)
    }

    /// Applies one game; unseen players enter at the initial rating.
    pub fn update(&mut self, a: &str, b: &str, outcome: Outcome) -> Result<()> {
        if a == b {
            return Err(Error::InvalidArgument(format!("player {a} cannot play itself")));
        }
        let (ra, rb) = (self.rating(a), self.rating(b));
        let delta = K_FACTOR * (outcome.score_a() - expected(ra, rb));
        let (na, nb) = (ra + delta, rb - delta);
        if !(na.is_finite() && nb.is_finite()) {
            return Err(Error::NonFinite { op: "elo_update".into() });
        }
        self.ratings.insert(a.to_string(), na);
        self.ratings.insert(b.to_string(), nb);
        self.log.push(GameRecord { a: a.into(), b: b.into(), outcome, rating_a: na, rating_b: nb });
        Ok(())
    }

    pub fn play_all(games: &[Game]) -> Result<Self> {
        let mut t = Self::new();
        for g in games {
            t.update(&g.a, &g.b, g.outcome)?;
        }
        Ok(t)
    }

    pub fn total(&self) -> f64 {
        self.ratings.values().sum()
    }
}
