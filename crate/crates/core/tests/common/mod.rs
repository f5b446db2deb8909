//! Synthetic end-to-end fixture: three attribute values with planted
//! indicative vocabularies, thirty users, encyclopedia pages in both modes,
//! and a clustered mock backend spec. Everything is generated from one
//! seed, so runs are exactly reproducible.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const HIDDEN: usize = 16;
pub const ALPHA: f64 = 0.6;

pub const VALUES: [(&str, &str, [&str; 8]); 3] = [
    ("dentist", "Dentistry", ["teeth", "cavity", "molar", "floss", "drill", "gums", "crown", "enamel"]),
    ("teacher", "Education", ["classroom", "students", "chalk", "lesson", "homework", "grading", "pupils", "syllabus"]),
    ("driver", "Transport", ["truck", "highway", "cargo", "route", "diesel", "freight", "mileage", "dispatch"]),
];

pub const FILLER: [&str; 20] = [
    "weather", "coffee", "music", "movie", "game", "dinner", "weekend", "morning", "phone", "email",
    "book", "garden", "photo", "bike", "river", "mountain", "pizza", "shoes", "chair", "window",
];

const FUNCTION: [&str; 8] = ["the", "i", "my", "a", "and", "to", "was", "with"];

fn unit_noise(rng: &mut ChaCha8Rng) -> Vec<f64> {
    // Random unit direction confined to the noise subspace (axes 6..16).
    let mut v = vec![0.0; HIDDEN];
    let mut norm = 0.0f64;
    for x in v.iter_mut().skip(6) {
        *x = rng.gen_range(-1.0..1.0);
        norm += *x * *x;
    }
    let norm = norm.sqrt().max(1e-9);
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

fn axis(i: usize, scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; HIDDEN];
    v[i] = scale;
    v
}

fn add_scaled(base: &mut [f64], other: &[f64], scale: f64) {
    for (b, o) in base.iter_mut().zip(other) {
        *b += scale * o;
    }
}

/// The mock backend spec: value words on their own axes, indicative words
/// clustered on per-value axes with individual noise, filler and function
/// words in the noise subspace.
fn mock_spec_json(rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<(String, Vec<f64>)> = Vec::new();
    for (vi, (value, _, cluster)) in VALUES.iter().enumerate() {
        let mut v = axis(2 * vi, 1.0);
        add_scaled(&mut v, &unit_noise(rng), 0.08);
        words.push((value.to_string(), v));
        for w in cluster {
            let mut c = axis(2 * vi + 1, 0.7);
            add_scaled(&mut c, &unit_noise(rng), 0.65);
            words.push((w.to_string(), c));
        }
    }
    for f in FILLER {
        let mut v = unit_noise(rng);
        v.iter_mut().for_each(|x| *x *= 0.9);
        words.push((f.to_string(), v));
    }
    for f in FUNCTION {
        let mut v = unit_noise(rng);
        v.iter_mut().for_each(|x| *x *= 0.3);
        words.push((f.to_string(), v));
    }
    let words_json: Vec<String> = words
        .iter()
        .map(|(w, v)| {
            let nums: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
            format!("{{\"word\": \"{w}\", \"vector\": [{}]}}", nums.join(", "))
        })
        .collect();
    format!("{{\"alpha\": {ALPHA}, \"max_len\": 512, \"words\": [\n{}\n]}}\n", words_json.join(",\n"))
}

fn wiki_pages_jsonl() -> String {
    let mut lines = Vec::new();
    for (value, category, c) in VALUES.iter() {
        // Main page: title equals the surface form; every surface occurrence
        // sits between two cluster words.
        let text = format!(
            "the {} {value} {} and {} {} . the {} {value} {} and {} {} . \
             a {} {value} {} with {} {} . the {} {value} {} and {} {} .",
            c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7], c[1], c[2], c[5], c[6], c[7], c[0], c[3], c[4],
        );
        lines.push(format!(
            "{{\"title\": \"{}\", \"text\": \"{text}\", \"categories\": [\"{category}\"]}}",
            capitalize(value)
        ));
        // Two leaf pages per value, tagged with the category only.
        for (li, pair) in [(0usize, (0usize, 3usize)), (1, (4, 7))] {
            let (a, b) = pair;
            let text = format!(
                "the {} and {} with {} . a {value} {} {} . the {} and {} .",
                c[a], c[a + 1], c[b], c[a + 1], c[b - 1], c[b], c[a],
            );
            lines.push(format!(
                "{{\"title\": \"{} {li}\", \"text\": \"{text}\", \"categories\": [\"{category}\"]}}",
                capitalize(c[a])
            ));
        }
    }
    lines.join("\n") + "\n"
}

fn capitalize(w: &str) -> String {
    let mut chars = w.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn schema_json() -> String {
    let values: Vec<String> = VALUES
        .iter()
        .map(|(value, category, _)| {
            format!("{{\"value\": \"{value}\", \"wiki_page\": null, \"wiki_categories\": [\"{category}\"]}}")
        })
        .collect();
    format!("{{\"attribute\": \"profession\", \"values\": [{}]}}\n", values.join(", "))
}

pub const USERS_PER_VALUE: usize = 10;

fn conversations_and_gold(rng: &mut ChaCha8Rng) -> (String, String) {
    let mut conv_lines = Vec::new();
    let mut gold_lines = Vec::new();
    for (vi, (value, _, cluster)) in VALUES.iter().enumerate() {
        for ui in 0..USERS_PER_VALUE {
            let user_id = format!("u{vi}_{ui}");
            let mut utterances: Vec<String> = Vec::new();
            for _ in 0..3 {
                let c1 = cluster.choose(rng).unwrap();
                let mut c2 = cluster.choose(rng).unwrap();
                while c2 == c1 {
                    c2 = cluster.choose(rng).unwrap();
                }
                let f = FILLER.choose(rng).unwrap();
                let pattern = rng.gen_range(0..3);
                utterances.push(match pattern {
                    0 => format!("the {c1} and {c2} {f} ."),
                    1 => format!("{f} with {c1} {c2} ."),
                    _ => format!("i was with the {c1} and {c2} ."),
                });
            }
            for _ in 0..2 {
                let f1 = FILLER.choose(rng).unwrap();
                let mut f2 = FILLER.choose(rng).unwrap();
                while f2 == f1 {
                    f2 = FILLER.choose(rng).unwrap();
                }
                utterances.push(format!("the {f1} and my {f2} ."));
            }
            // Two users per value mention the surface form once, in a
            // cross-topic context (a word of the *next* value's cluster).
            // Utterances-only vocabularies built from these few noisy
            // occurrences latch onto the wrong cluster, while page
            // occurrences swamp them when document supervision is on.
            if ui < 2 {
                let foreign = VALUES[(vi + 1) % VALUES.len()].2[ui];
                let f = FILLER.choose(rng).unwrap();
                utterances.push(format!("my {value} {foreign} was {f} ."));
            }
            utterances.shuffle(rng);
            let quoted: Vec<String> = utterances.iter().map(|u| format!("\"{u}\"")).collect();
            conv_lines.push(format!("{{\"user_id\": \"{user_id}\", \"utterances\": [{}]}}", quoted.join(", ")));
            gold_lines.push(format!("{{\"user_id\": \"{user_id}\", \"values\": [\"{value}\"]}}"));
        }
    }
    (conv_lines.join("\n") + "\n", gold_lines.join("\n") + "\n")
}

pub struct Fixture {
    pub root: PathBuf,
}

impl Fixture {
    /// Writes a config variant and returns its path.
    pub fn write_config(
        &self,
        name: &str,
        workdir: &str,
        mode: &str,
        seed: u64,
        ablation: (bool, bool, bool),
    ) -> PathBuf {
        let (word, doc, confidence) = ablation;
        let body = format!(
            r#"mode = "{mode}"

[paths]
corpus = "conversations.jsonl"
schema = "schema.json"
wiki = "wiki_pages.jsonl"
gold = "gold.jsonl"
workdir = "{workdir}"

[guess]
k = 12
m = 10
beta = 0.4
cross_vocab_threshold = 0.5
transductive = true

[train]
q = 0.4
batch_size = 4
lr = 0.05
epochs = 3
seed = {seed}

[backend]
kind = "mock"
mock_spec = "mock_spec.json"
max_len = 64

[ablation]
use_word_supervision = {word}
use_doc_supervision = {doc}
use_confidence_weight = {confidence}
"#
        );
        let path = self.root.join(name);
        fs::write(&path, body).unwrap();
        path
    }
}

/// Generates the whole fixture under `root`.
pub fn build_fixture(root: &Path, seed: u64) -> Fixture {
    fs::create_dir_all(root).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::write(root.join("mock_spec.json"), mock_spec_json(&mut rng)).unwrap();
    fs::write(root.join("schema.json"), schema_json()).unwrap();
    fs::write(root.join("wiki_pages.jsonl"), wiki_pages_jsonl()).unwrap();
    let (conversations, gold) = conversations_and_gold(&mut rng);
    fs::write(root.join("conversations.jsonl"), conversations).unwrap();
    fs::write(root.join("gold.jsonl"), gold).unwrap();
    Fixture { root: root.to_path_buf() }
}
