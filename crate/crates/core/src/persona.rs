//! Task persona lattices and user-profile generation.
//!
//! Each task defines three binary trait dimensions; P4G additionally tags
//! every persona with a donation-acceptance difficulty, giving 16 personas
//! for P4G and 8 for ESConv. Profiles are natural-language instantiations
//! of a persona used to condition a simulated user.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dialogue task flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Persuasion-for-good: convince the user to donate (non-cooperative).
    #[serde(rename = "p4g")]
    P4g,
    /// Emotional support conversations (cooperative).
    #[serde(rename = "esconv")]
    Esconv,
}

impl Task {
    pub fn parse(s: &str) -> Result<Task> {
        match s.to_ascii_lowercase().as_str() {
            "p4g" => Ok(Task::P4g),
            "esconv" => Ok(Task::Esconv),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }

    /// Number of distinct personas for this task.
    pub fn persona_count(self) -> usize {
        match self {
            Task::P4g => 16,
            Task::Esconv => 8,
        }
    }

    pub fn dimensions(self) -> &'static [PersonaDimension] {
        match self {
            Task::P4g => &P4G_DIMENSIONS,
            Task::Esconv => &ESCONV_DIMENSIONS,
        }
    }

    /// Per-persona (train, valid, test) profile quotas.
    pub fn profile_quota(self) -> (usize, usize, usize) {
        match self {
            Task::P4g => (25, 5, 5),
            Task::Esconv => (5, 1, 1),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Task::P4g => write!(f, "p4g"),
            Task::Esconv => write!(f, "esconv"),
        }
    }
}

/// A binary trait axis (exactly two options, first option has index 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PersonaDimension {
    pub name: &'static str,
    pub options: [&'static str; 2],
}

pub const P4G_DIMENSIONS: [PersonaDimension; 3] = [
    PersonaDimension { name: "income", options: ["Well-off", "Financially-tight"] },
    PersonaDimension { name: "personality", options: ["Compassionate", "Rejective"] },
    PersonaDimension { name: "decision_type", options: ["Rational", "Emotional"] },
];

pub const ESCONV_DIMENSIONS: [PersonaDimension; 3] = [
    PersonaDimension { name: "extroversion", options: ["Extravert", "Introvert"] },
    PersonaDimension { name: "openness", options: ["Adventurous", "Conservative"] },
    PersonaDimension { name: "neuroticism", options: ["Rational", "Neurotic"] },
];

/// P4G-only acceptance difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Hard,
    Easy,
}

impl Difficulty {
    pub fn label(self) -> &'static str {
        match self {
            Difficulty::Hard => "hard",
            Difficulty::Easy => "easy",
        }
    }
}

/// One point of the persona lattice.
///
/// `index` is the position in the canonical enumeration: lexicographic over
/// the dimensions in declaration order, difficulty varying fastest.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Persona {
    pub task: Task,
    /// Chosen option index (0 or 1) per dimension, in `Task::dimensions` order.
    pub options: Vec<u8>,
    pub difficulty: Option<Difficulty>,
    pub index: usize,
}

impl Persona {
    /// (dimension name, chosen option label) pairs.
    pub fn trait_labels(&self) -> Vec<(&'static str, &'static str)> {
        self.task
            .dimensions()
            .iter()
            .zip(&self.options)
            .map(|(dim, &o)| (dim.name, dim.options[o as usize]))
            .collect()
    }

    /// All option labels a profile text must mention.
    pub fn keywords(&self) -> Vec<&'static str> {
        self.trait_labels().into_iter().map(|(_, opt)| opt).collect()
    }

    /// Deterministic natural-language description of the persona itself.
    /// Used as input to the frozen text encoder when building persona banks.
    pub fn description(&self) -> String {
        let traits = self
            .trait_labels()
            .iter()
            .map(|(dim, opt)| format!("{} {}", opt, dim.replace('_', " ")))
            .collect::<Vec<_>>()
            .join(", ");
        match (self.task, self.difficulty) {
            (Task::P4g, Some(d)) => format!(
                "A potential donor with traits: {traits}. Convincing them to donate is {}.",
                d.label()
            ),
            (Task::Esconv, _) => {
                format!("A person seeking emotional support with traits: {traits}.")
            }
            (Task::P4g, None) => format!("A potential donor with traits: {traits}."),
        }
    }
}

/// All personas of a task in canonical order (index 0..M-1).
pub fn enumerate_personas(task: Task) -> Vec<Persona> {
    let dims = task.dimensions();
    let with_difficulty = task == Task::P4g;
    let mut out = Vec::with_capacity(task.persona_count());
    let combos = 1usize << dims.len();
    for combo in 0..combos {
        let options: Vec<u8> = (0..dims.len())
            .map(|d| ((combo >> (dims.len() - 1 - d)) & 1) as u8)
            .collect();
        if with_difficulty {
            for difficulty in [Difficulty::Hard, Difficulty::Easy] {
                out.push(Persona {
                    task,
                    options: options.clone(),
                    difficulty: Some(difficulty),
                    index: out.len(),
                });
            }
        } else {
            out.push(Persona { task, options, difficulty: None, index: out.len() });
        }
    }
    out
}

/// Dataset split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// A persona made concrete as profile text for user role-play.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub persona: Persona,
    pub profile_text: String,
    pub profile_id: String,
    pub split: Split,
}

/// Source of profile text.
pub enum ProfileBackend<'a> {
    /// Deterministic trait-bearing templates; pure function of (persona, seed).
    Template,
    /// Any text completer (an LLM client in practice). Output is validated to
    /// mention every trait keyword and regenerated up to `max_retries` times.
    Completer { completer: &'a mut dyn Completer, max_retries: usize },
}

/// Minimal completion interface so profile generation stays decoupled from
/// any particular chat client.
pub trait Completer {
    fn complete(&mut self, prompt: &str) -> Result<String>;
}

const OPENERS: [&str; 3] =
    ["This person is", "You are talking with someone who is", "The user is"];
const QUALIFIERS: [&str; 3] = ["generally", "notably", "decidedly"];

fn trait_sentence(dim: &str, option: &str, rng: &mut ChaCha8Rng) -> String {
    let q = QUALIFIERS.choose(rng).unwrap();
    format!("On {}, they are {} {}.", dim.replace('_', " "), q, option)
}

/// Build a profile from a persona.
///
/// Template mode is byte-deterministic given (persona, seed) and guarantees
/// every trait keyword appears in the text.
pub fn generate_profile(
    persona: &Persona,
    backend: ProfileBackend<'_>,
    seed: u64,
    profile_id: String,
    split: Split,
) -> Result<UserProfile> {
    let text = match backend {
        ProfileBackend::Template => template_profile_text(persona, seed),
        ProfileBackend::Completer { completer, max_retries } => {
            let prompt = profile_prompt(persona);
            let mut last_err = None;
            let mut text = None;
            for _ in 0..max_retries.max(1) {
                match completer.complete(&prompt) {
                    Ok(t) => match validate_profile_text(persona, &t) {
                        Ok(()) => {
                            text = Some(t);
                            break;
                        }
                        Err(e) => last_err = Some(e),
                    },
                    Err(e) if e.is_retryable() => last_err = Some(e),
                    Err(e) => return Err(e),
                }
            }
            match text {
                Some(t) => t,
                None => {
                    return Err(last_err.unwrap_or_else(|| {
                        Error::Validation("profile generation produced no text".into())
                    }))
                }
            }
        }
    };
    validate_profile_text(persona, &text)?;
    Ok(UserProfile { persona: persona.clone(), profile_text: text, profile_id, split })
}

/// Deterministic template text; mixes seeded sentence variants so distinct
/// seeds give distinct profiles of the same persona.
pub fn template_profile_text(persona: &Persona, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((persona.index as u64) << 32));
    let opener = OPENERS.choose(&mut rng).unwrap();
    let mut sentences = vec![match persona.task {
        Task::P4g => format!("{opener} a potential donor approached about a children's charity."),
        Task::Esconv => format!("{opener} reaching out because something is weighing on them."),
    }];
    for (dim, opt) in persona.trait_labels() {
        sentences.push(trait_sentence(dim, opt, &mut rng));
    }
    if let Some(d) = persona.difficulty {
        sentences.push(format!("Getting them to commit to a donation is {}.", d.label()));
    }
    sentences.join(" ")
}

/// Prompt handed to an LLM completer when generating a profile.
pub fn profile_prompt(persona: &Persona) -> String {
    let traits = persona
        .trait_labels()
        .iter()
        .map(|(dim, opt)| format!("- {}: {}", dim.replace('_', " "), opt))
        .collect::<Vec<_>>()
        .join("\n");
    let difficulty = persona
        .difficulty
        .map(|d| format!("\n- donation acceptance difficulty: {}", d.label()))
        .unwrap_or_default();
    format!(
        "Write a short third-person profile of a user for a role-play dialogue. \
         The profile must explicitly mention each trait keyword below at least once.\n\
         Traits:\n{traits}{difficulty}\nProfile:"
    )
}

/// Check that `text` mentions every trait keyword (case-insensitive).
pub fn validate_profile_text(persona: &Persona, text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::Validation("profile text is empty".into()));
    }
    let lower = text.to_ascii_lowercase();
    for kw in persona.keywords() {
        if !lower.contains(&kw.to_ascii_lowercase()) {
            return Err(Error::Validation(format!("profile text missing trait keyword `{kw}`")));
        }
    }
    Ok(())
}

/// An in-memory profile collection with id lookup.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileSet {
    profiles: Vec<UserProfile>,
}

impl ProfileSet {
    pub fn new(profiles: Vec<UserProfile>) -> Self {
        ProfileSet { profiles }
    }

    pub fn profiles(&self) -> &[UserProfile] {
        &self.profiles
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn by_id(&self, id: &str) -> Option<&UserProfile> {
        self.profiles.iter().find(|p| p.profile_id == id)
    }

    pub fn split(&self, split: Split) -> Vec<&UserProfile> {
        self.profiles.iter().filter(|p| p.split == split).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &UserProfile> {
        self.profiles.iter()
    }
}

/// Generate the full train/valid/test profile set for a task with the
/// template backend (25/5/5 per persona for P4G, 5/1/1 for ESConv).
pub fn generate_profile_set(task: Task, seed: u64) -> Result<ProfileSet> {
    let (n_train, n_valid, n_test) = task.profile_quota();
    let mut profiles = Vec::new();
    for persona in enumerate_personas(task) {
        let mut counter = 0usize;
        for (split, quota) in
            [(Split::Train, n_train), (Split::Valid, n_valid), (Split::Test, n_test)]
        {
            for _ in 0..quota {
                let id = format!("{task}-{:02}-{}-{counter:03}", persona.index, split.label());
                let profile = generate_profile(
                    &persona,
                    ProfileBackend::Template,
                    seed.wrapping_add(counter as u64),
                    id,
                    split,
                )?;
                profiles.push(profile);
                counter += 1;
            }
        }
    }
    Ok(ProfileSet::new(profiles))
}

#[derive(Serialize, Deserialize)]
struct ProfileRecord {
    profile_id: String,
    task: Task,
    persona_index: usize,
    traits: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    difficulty: Option<Difficulty>,
    split: Split,
    profile_text: String,
}

/// Write profiles as JSONL, one record per line.
pub fn save_profiles(profiles: &ProfileSet, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in profiles.iter() {
        let record = ProfileRecord {
            profile_id: p.profile_id.clone(),
            task: p.persona.task,
            persona_index: p.persona.index,
            traits: p
                .persona
                .trait_labels()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            difficulty: p.persona.difficulty,
            split: p.split,
            profile_text: p.profile_text.clone(),
        };
        serde_json::to_writer(&mut file, &record)
            .map_err(|e| Error::Data(format!("serializing profile: {e}")))?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

/// Read profiles back, validating persona indices and trait keywords.
pub fn load_profiles(path: &Path) -> Result<ProfileSet> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut profiles = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ProfileRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse { line: lineno + 1, msg: e.to_string() })?;
        let catalog = enumerate_personas(record.task);
        let persona = catalog.get(record.persona_index).cloned().ok_or(Error::Parse {
            line: lineno + 1,
            msg: format!("unknown persona index {} for {}", record.persona_index, record.task),
        })?;
        let profile = UserProfile {
            persona,
            profile_text: record.profile_text,
            profile_id: record.profile_id,
            split: record.split,
        };
        validate_profile_text(&profile.persona, &profile.profile_text)
            .map_err(|e| Error::Parse { line: lineno + 1, msg: e.to_string() })?;
        profiles.push(profile);
    }
    Ok(ProfileSet::new(profiles))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p4g_has_16_personas() {
        assert_eq!(enumerate_personas(Task::P4g).len(), 16);
    }

    #[test]
    fn esconv_has_8_personas() {
        assert_eq!(enumerate_personas(Task::Esconv).len(), 8);
    }

    #[test]
    fn enumeration_is_deterministic_and_bijective() {
        for task in [Task::P4g, Task::Esconv] {
            let a = enumerate_personas(task);
            let b = enumerate_personas(task);
            assert_eq!(a, b);
            for (i, p) in a.iter().enumerate() {
                assert_eq!(p.index, i);
            }
            let mut seen: Vec<_> = a.iter().map(|p| (p.options.clone(), p.difficulty)).collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), task.persona_count());
        }
    }

    #[test]
    fn template_profiles_are_seed_deterministic() {
        let persona = &enumerate_personas(Task::P4g)[0];
        let a = generate_profile(persona, ProfileBackend::Template, 7, "x".into(), Split::Train)
            .unwrap();
        let b = generate_profile(persona, ProfileBackend::Template, 7, "x".into(), Split::Train)
            .unwrap();
        assert_eq!(a.profile_text, b.profile_text);
        let c = generate_profile(persona, ProfileBackend::Template, 8, "x".into(), Split::Train)
            .unwrap();
        assert_ne!(a.profile_text, c.profile_text);
    }

    #[test]
    fn template_profiles_mention_all_traits() {
        for task in [Task::P4g, Task::Esconv] {
            for persona in enumerate_personas(task) {
                let text = template_profile_text(&persona, 3);
                let lower = text.to_ascii_lowercase();
                for kw in persona.keywords() {
                    assert!(lower.contains(&kw.to_ascii_lowercase()), "{text} missing {kw}");
                }
            }
        }
    }

    #[test]
    fn esconv_introvert_profile_contains_keyword() {
        let persona = enumerate_personas(Task::Esconv)
            .into_iter()
            .find(|p| p.keywords().contains(&"Introvert"))
            .unwrap();
        let text = template_profile_text(&persona, 0);
        assert!(text.contains("Introvert"));
    }

    #[test]
    fn p4g_split_set_counts() {
        let set = generate_profile_set(Task::P4g, 11).unwrap();
        assert_eq!(set.split(Split::Train).len(), 400);
        assert_eq!(set.split(Split::Valid).len(), 80);
        assert_eq!(set.split(Split::Test).len(), 80);
        // exact per-persona quota
        for persona in enumerate_personas(Task::P4g) {
            let n = set
                .split(Split::Train)
                .iter()
                .filter(|p| p.persona.index == persona.index)
                .count();
            assert_eq!(n, 25);
        }
    }

    #[test]
    fn esconv_split_set_counts() {
        let set = generate_profile_set(Task::Esconv, 11).unwrap();
        assert_eq!(set.split(Split::Train).len(), 40);
        assert_eq!(set.split(Split::Valid).len(), 8);
        assert_eq!(set.split(Split::Test).len(), 8);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("profiles.jsonl");
        let p4g = generate_profile_set(Task::P4g, 5).unwrap();
        let esc = generate_profile_set(Task::Esconv, 5).unwrap();
        let mut all: Vec<UserProfile> =
            p4g.iter().chain(esc.iter()).cloned().collect();
        all.truncate(488);
        let set = ProfileSet::new(all);
        save_profiles(&set, &path).unwrap();
        let loaded = load_profiles(&path).unwrap();
        assert_eq!(loaded.len(), 488);
        assert_eq!(loaded, set);
    }

    #[test]
    fn empty_file_loads_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let loaded = load_profiles(&path).unwrap();
        assert!(loaded.is_empty());
    }

    #[test]
    fn unknown_persona_index_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"profile_id":"x","task":"esconv","persona_index":99,"traits":{},"split":"train","profile_text":"whatever"}"#,
        )
        .unwrap();
        match load_profiles(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_task_string_is_config_error() {
        assert!(matches!(Task::parse("banter"), Err(Error::Config(_))));
    }
}
