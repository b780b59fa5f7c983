//! Moral Machine dilemmas: an autonomous car with failed brakes either stays
//! on course or swerves, and each outcome kills a group of one to five
//! characters.
//!
//! Scenarios vectorize to 26 values (`stay − swerve` per feature) and render
//! to a fixed English description for the language-model reward model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::MoralMachineError;

pub const MM_SCHEMA: &str = "irda-mm/1";
pub const VECTOR_DIM: usize = 26;
pub const MAX_CHARACTERS: u8 = 5;

/// The 20 character types, in the column order of the public response dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CharacterType {
    Man,
    Woman,
    Pregnant,
    Stroller,
    OldMan,
    OldWoman,
    Boy,
    Girl,
    Homeless,
    LargeWoman,
    LargeMan,
    Criminal,
    MaleExecutive,
    FemaleExecutive,
    FemaleAthlete,
    MaleAthlete,
    FemaleDoctor,
    MaleDoctor,
    Dog,
    Cat,
}

impl CharacterType {
    pub const ALL: [CharacterType; 20] = [
        CharacterType::Man,
        CharacterType::Woman,
        CharacterType::Pregnant,
        CharacterType::Stroller,
        CharacterType::OldMan,
        CharacterType::OldWoman,
        CharacterType::Boy,
        CharacterType::Girl,
        CharacterType::Homeless,
        CharacterType::LargeWoman,
        CharacterType::LargeMan,
        CharacterType::Criminal,
        CharacterType::MaleExecutive,
        CharacterType::FemaleExecutive,
        CharacterType::FemaleAthlete,
        CharacterType::MaleAthlete,
        CharacterType::FemaleDoctor,
        CharacterType::MaleDoctor,
        CharacterType::Dog,
        CharacterType::Cat,
    ];

    pub fn column(self) -> &'static str {
        match self {
            CharacterType::Man => "Man",
            CharacterType::Woman => "Woman",
            CharacterType::Pregnant => "Pregnant",
            CharacterType::Stroller => "Stroller",
            CharacterType::OldMan => "OldMan",
            CharacterType::OldWoman => "OldWoman",
            CharacterType::Boy => "Boy",
            CharacterType::Girl => "Girl",
            CharacterType::Homeless => "Homeless",
            CharacterType::LargeWoman => "LargeWoman",
            CharacterType::LargeMan => "LargeMan",
            CharacterType::Criminal => "Criminal",
            CharacterType::MaleExecutive => "MaleExecutive",
            CharacterType::FemaleExecutive => "FemaleExecutive",
            CharacterType::FemaleAthlete => "FemaleAthlete",
            CharacterType::MaleAthlete => "MaleAthlete",
            CharacterType::FemaleDoctor => "FemaleDoctor",
            CharacterType::MaleDoctor => "MaleDoctor",
            CharacterType::Dog => "Dog",
            CharacterType::Cat => "Cat",
        }
    }

    fn singular(self) -> &'static str {
        match self {
            CharacterType::Man => "man",
            CharacterType::Woman => "woman",
            CharacterType::Pregnant => "pregnant woman",
            CharacterType::Stroller => "baby in a stroller",
            CharacterType::OldMan => "elderly man",
            CharacterType::OldWoman => "elderly woman",
            CharacterType::Boy => "boy",
            CharacterType::Girl => "girl",
            CharacterType::Homeless => "homeless person",
            CharacterType::LargeWoman => "large woman",
            CharacterType::LargeMan => "large man",
            CharacterType::Criminal => "criminal",
            CharacterType::MaleExecutive => "male executive",
            CharacterType::FemaleExecutive => "female executive",
            CharacterType::FemaleAthlete => "female athlete",
            CharacterType::MaleAthlete => "male athlete",
            CharacterType::FemaleDoctor => "female doctor",
            CharacterType::MaleDoctor => "male doctor",
            CharacterType::Dog => "dog",
            CharacterType::Cat => "cat",
        }
    }

    fn plural(self) -> &'static str {
        match self {
            CharacterType::Man => "men",
            CharacterType::Woman => "women",
            CharacterType::Pregnant => "pregnant women",
            CharacterType::Stroller => "babies in strollers",
            CharacterType::OldMan => "elderly men",
            CharacterType::OldWoman => "elderly women",
            CharacterType::Boy => "boys",
            CharacterType::Girl => "girls",
            CharacterType::Homeless => "homeless people",
            CharacterType::LargeWoman => "large women",
            CharacterType::LargeMan => "large men",
            CharacterType::Criminal => "criminals",
            CharacterType::MaleExecutive => "male executives",
            CharacterType::FemaleExecutive => "female executives",
            CharacterType::FemaleAthlete => "female athletes",
            CharacterType::MaleAthlete => "male athletes",
            CharacterType::FemaleDoctor => "female doctors",
            CharacterType::MaleDoctor => "male doctors",
            CharacterType::Dog => "dogs",
            CharacterType::Cat => "cats",
        }
    }

    fn phrase(self, count: u8) -> String {
        if count == 1 {
            let noun = self.singular();
            let article = if noun.starts_with(['a', 'e', 'i', 'o', 'u']) { "An" } else { "A" };
            format!("{article} {noun}")
        } else {
            format!("{count} {}", self.plural())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossingSignal {
    #[default]
    None,
    Green,
    Red,
}

impl CrossingSignal {
    pub fn code(self) -> u8 {
        match self {
            CrossingSignal::None => 0,
            CrossingSignal::Green => 1,
            CrossingSignal::Red => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CrossingSignal::None),
            1 => Some(CrossingSignal::Green),
            2 => Some(CrossingSignal::Red),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Outcome {
    pub intervention: u8,
    pub ped_ped: u8,
    pub barrier: u8,
    pub crossing_signal: CrossingSignal,
    /// Counts indexed like [`CharacterType::ALL`].
    pub character_counts: [u8; 20],
    pub number_of_characters: u8,
    /// Absolute difference in group size between the two outcomes; the same on both rows.
    pub diff_number_of_characters: i32,
}

impl Outcome {
    pub fn count(&self, t: CharacterType) -> u8 {
        self.character_counts[t as usize]
    }

    fn features(&self) -> [f64; VECTOR_DIM] {
        let mut f = [0.0; VECTOR_DIM];
        f[0] = self.intervention as f64;
        f[1] = self.ped_ped as f64;
        f[2] = self.barrier as f64;
        f[3] = self.crossing_signal.code() as f64;
        f[4] = self.number_of_characters as f64;
        f[5] = self.diff_number_of_characters as f64;
        for (slot, c) in f[6..].iter_mut().zip(self.character_counts) {
            *slot = c as f64;
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MoralMachineScenario {
    pub id: String,
    pub stay: Outcome,
    pub swerve: Outcome,
}

impl MoralMachineScenario {
    pub fn validate(&self) -> Result<(), MoralMachineError> {
        let bad = |m: String| Err(MoralMachineError::InvalidScenario(format!("{}: {m}", self.id)));
        for (name, o) in [("stay", &self.stay), ("swerve", &self.swerve)] {
            if o.intervention > 1 || o.ped_ped > 1 || o.barrier > 1 {
                return bad(format!("{name}: structure flags must be 0 or 1"));
            }
            let total: u32 = o.character_counts.iter().map(|c| *c as u32).sum();
            if total != o.number_of_characters as u32 {
                return bad(format!("{name}: {total} characters listed but NumberOfCharacters is {}", o.number_of_characters));
            }
            if !(1..=MAX_CHARACTERS).contains(&o.number_of_characters) {
                return bad(format!("{name}: an outcome needs 1 to 5 characters"));
            }
        }
        if self.stay.intervention + self.swerve.intervention != 1 {
            return bad("exactly one outcome must be the intervention".into());
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        Self {
            id: self.id.clone(),
            stay: self.swerve.clone(),
            swerve: self.stay.clone(),
        }
    }
}

/// Feature order: Intervention, PedPed, Barrier, CrossingSignal, NumberOfCharacters,
/// DiffNumberOfCharacters, then the 20 character types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioVector(pub [f64; VECTOR_DIM]);

impl ScenarioVector {
    pub const NUMBER_OF_CHARACTERS: usize = 4;
    pub const DIFF_NUMBER_OF_CHARACTERS: usize = 5;
    pub const FIRST_CHARACTER: usize = 6;

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn character_delta(&self, t: CharacterType) -> f64 {
        self.0[Self::FIRST_CHARACTER + t as usize]
    }
}

pub fn vectorize(s: &MoralMachineScenario) -> ScenarioVector {
    let (a, b) = (s.stay.features(), s.swerve.features());
    ScenarioVector(std::array::from_fn(|i| a[i] - b[i]))
}

/// Per-dimension z-score parameters (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    /// 1.0 for zero-variance dimensions, which are only centred.
    pub scale: Vec<f64>,
}

impl Scaler {
    pub fn fit(rows: &[&[f64]]) -> Result<Self, MoralMachineError> {
        if rows.len() < 2 {
            return Err(MoralMachineError::TooFewSamples(rows.len()));
        }
        let dim = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let std = (s / n).sqrt();
                if std <= 1e-12 * m.abs().max(1.0) {
                    1.0
                } else {
                    std
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

pub fn standardize(vectors: &[ScenarioVector]) -> Result<(Vec<ScenarioVector>, Scaler), MoralMachineError> {
    let rows: Vec<&[f64]> = vectors.iter().map(|v| v.values()).collect();
    let scaler = Scaler::fit(&rows)?;
    let out = vectors
        .iter()
        .map(|v| {
            let t = scaler.transform(v.values());
            ScenarioVector(std::array::from_fn(|i| t[i]))
        })
        .collect();
    Ok((out, scaler))
}

fn outcome_paragraph(out: &mut String, lead: &str, o: &Outcome) {
    let n = o.number_of_characters;
    let legality = match o.crossing_signal {
        CrossingSignal::Red => "crossing against a red do not walk signal",
        CrossingSignal::Green => "crossing with a green walk signal",
        CrossingSignal::None => "crossing the road",
    };
    let clause = match (o.barrier == 1, n == 1) {
        (true, true) => "it will crash into a concrete barrier, killing the passenger inside. The passenger is:".to_string(),
        (true, false) => format!(
            "it will crash into a concrete barrier, killing the {n} passengers inside. The group of passengers include:"
        ),
        (false, true) => format!("it will run over a pedestrian who is {legality}. The pedestrian is:"),
        (false, false) => format!(
            "it will run over a group of {n} pedestrians who are {legality}. The group of pedestrians include:"
        ),
    };
    let _ = writeln!(out, "{lead}{clause}");
    for t in CharacterType::ALL {
        let c = o.count(t);
        if c > 0 {
            let _ = writeln!(out, "    - {}", t.phrase(c));
        }
    }
}

/// Fixed-template English description of a scenario.
pub fn render_text(s: &MoralMachineScenario) -> String {
    let mut out = String::from(
        "The brakes of a self-driving car have failed. The self-driving car can continue driving \
         straight ahead or swerve. ",
    );
    outcome_paragraph(&mut out, "If the car continues straight ahead, ", &s.stay);
    outcome_paragraph(&mut out, "If the car swerves, ", &s.swerve);
    out
}

fn random_outcome<R: Rng + ?Sized>(rng: &mut R, barrier: bool) -> Outcome {
    let n = rng.random_range(1..=MAX_CHARACTERS);
    let mut counts = [0u8; 20];
    for _ in 0..n {
        counts[rng.random_range(0..20usize)] += 1;
    }
    let crossing_signal = if barrier {
        CrossingSignal::None
    } else {
        CrossingSignal::from_code(rng.random_range(0..3u8)).expect("code in range")
    };
    Outcome {
        intervention: 0,
        ped_ped: 0,
        barrier: u8::from(barrier),
        crossing_signal,
        character_counts: counts,
        number_of_characters: n,
        diff_number_of_characters: 0,
    }
}

/// Synthetic scenarios over the same nine dimensions as the public dataset.
pub fn generate_scenarios(n: usize, seed: u64) -> Vec<MoralMachineScenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            // One third of dilemmas put the passengers of the car on one side.
            let barrier_side = if rng.random_range(0..3u8) == 0 {
                Some(rng.random_bool(0.5))
            } else {
                None
            };
            let mut stay = random_outcome(&mut rng, barrier_side == Some(false));
            let mut swerve = random_outcome(&mut rng, barrier_side == Some(true));
            swerve.intervention = 1;
            let ped_ped = u8::from(barrier_side.is_none());
            let diff = (stay.number_of_characters as i32 - swerve.number_of_characters as i32).abs();
            for o in [&mut stay, &mut swerve] {
                o.ped_ped = ped_ped;
                o.diff_number_of_characters = diff;
            }
            MoralMachineScenario {
                id: format!("mm-{i:04}"),
                stay,
                swerve,
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct MmRecord {
    schema: String,
    #[serde(flatten)]
    scenario: MoralMachineScenario,
}

pub fn write_scenarios<W: std::io::Write>(mut w: W, scenarios: &[MoralMachineScenario]) -> std::io::Result<()> {
    for s in scenarios {
        let rec = MmRecord {
            schema: MM_SCHEMA.to_string(),
            scenario: s.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_scenarios<R: std::io::BufRead>(r: R) -> Result<Vec<MoralMachineScenario>, MoralMachineError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| MoralMachineError::BadRow { row: i + 1, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: MmRecord = serde_json::from_str(&line)?;
        if rec.schema != MM_SCHEMA {
            return Err(MoralMachineError::BadRow {
                row: i + 1,
                message: format!("unsupported schema `{}`", rec.schema),
            });
        }
        rec.scenario.validate()?;
        out.push(rec.scenario);
    }
    Ok(out)
}

const STRUCTURE_COLUMNS: [&str; 7] = [
    "ResponseID",
    "Intervention",
    "PedPed",
    "Barrier",
    "CrossingSignal",
    "NumberOfCharacters",
    "DiffNumberOFCharacters",
];

/// Imports the public response dataset: two rows per `ResponseID`, paired on
/// the `Intervention` column (0 = stay, 1 = swerve).
pub fn import_csv<R: Read>(reader: R) -> Result<Vec<MoralMachineScenario>, MoralMachineError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| MoralMachineError::MissingColumn(name.to_string()))
    };
    let structure: Vec<usize> = STRUCTURE_COLUMNS.iter().map(|c| col(c)).collect::<Result<_, _>>()?;
    let characters: Vec<usize> = CharacterType::ALL
        .iter()
        .map(|t| col(t.column()))
        .collect::<Result<_, _>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<(usize, Outcome)>> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let num = |idx: usize| -> Result<f64, MoralMachineError> {
            let raw = record.get(idx).unwrap_or("").trim();
            raw.parse::<f64>().map_err(|_| MoralMachineError::BadRow {
                row,
                message: format!("column `{}` is not numeric: `{raw}`", &headers[idx]),
            })
        };
        let small = |idx: usize| -> Result<u8, MoralMachineError> {
            let v = num(idx)?;
            if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                return Err(MoralMachineError::BadRow { row, message: format!("column `{}` out of range", &headers[idx]) });
            }
            Ok(v as u8)
        };
        let id = record.get(structure[0]).unwrap_or("").trim().to_string();
        let signal = small(structure[4])?;
        let mut counts = [0u8; 20];
        for (slot, idx) in counts.iter_mut().zip(&characters) {
            *slot = small(*idx)?;
        }
        let outcome = Outcome {
            intervention: small(structure[1])?,
            ped_ped: small(structure[2])?,
            barrier: small(structure[3])?,
            crossing_signal: CrossingSignal::from_code(signal)
                .ok_or_else(|| MoralMachineError::BadRow { row, message: format!("CrossingSignal {signal}") })?,
            character_counts: counts,
            number_of_characters: small(structure[5])?,
            diff_number_of_characters: num(structure[6])? as i32,
        };
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push((row, outcome));
    }

    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let pair = rows.remove(&id).expect("id was recorded");
        let row = pair[0].0;
        if pair.len() != 2 {
            return Err(MoralMachineError::BadRow {
                row,
                message: format!("response `{id}` has {} rows, expected 2", pair.len()),
            });
        }
        let (mut a, mut b) = (pair[0].1.clone(), pair[1].1.clone());
        if a.intervention == 1 {
            std::mem::swap(&mut a, &mut b);
        }
        let s = MoralMachineScenario { id, stay: a, swerve: b };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}
