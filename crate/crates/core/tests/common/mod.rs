#![allow(dead_code)]

use std::path::Path;

use lateral_core::corpus::{save_corpus, Category, Corpus, LoadOptions, Riddle, Split};

pub const SUFFIXES: [(&str, Category); 3] = [
    ("", Category::Original),
    ("_SR", Category::Semantic),
    ("_CR", Category::Context),
];

pub fn riddle(id: &str, question: &str, options: [&str; 4], label: Option<usize>, split: Split) -> Riddle {
    let group_id = lateral_core::corpus::derive_group_id(id).to_owned();
    let category = SUFFIXES
        .iter()
        .rev()
        .find(|(s, _)| !s.is_empty() && id.ends_with(s))
        .map_or(Category::Original, |(_, c)| *c);
    Riddle {
        id: id.into(),
        question: question.into(),
        options: options.map(String::from),
        label,
        category,
        group_id,
        split,
    }
}

/// `groups` complete groups in `split`. Each riddle's question mentions its
/// correct option, so the echo-option mock answers a predictable subset.
pub fn grouped(prefix: &str, groups: usize, split: Split) -> Vec<Riddle> {
    let mut out = Vec::new();
    for g in 0..groups {
        for (m, (suffix, _)) in SUFFIXES.iter().enumerate() {
            let label = (g + m) % 4;
            let options = [
                format!("{prefix}apple{g}"),
                format!("{prefix}river{g}"),
                format!("{prefix}cloud{g}"),
                format!("{prefix}stone{g}"),
            ];
            let question = format!(
                "What has {} and {prefix}topic{g} variant{m} but never speaks",
                options[label]
            );
            out.push(Riddle {
                id: format!("{prefix}{g}{suffix}"),
                question,
                options,
                label: Some(label),
                category: SUFFIXES[m].1,
                group_id: format!("{prefix}{g}"),
                split,
            });
        }
    }
    out
}

pub fn corpus(riddles: Vec<Riddle>) -> Corpus {
    let opts = LoadOptions {
        allow_partial_groups: true,
    };
    Corpus::with_options(riddles, &opts).expect("valid corpus").0
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> std::path::PathBuf {
    let path = dir.join("corpus.json");
    save_corpus(corpus, &path).expect("corpus written");
    path
}
