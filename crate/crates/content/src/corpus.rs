//! Seeded corpus generation and mutation for the integrity experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tree::{ComponentKind, ObjectContent};

#[derive(Clone, Copy, Debug)]
pub struct CorpusParams {
    pub objects: usize,
    pub components_per_object: usize,
    pub files_per_component: usize,
    pub file_len: usize,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            objects: 200,
            components_per_object: 5,
            files_per_component: 6,
            file_len: 64,
            seed: 0,
        }
    }
}

const KINDS: [ComponentKind; 5] = [
    ComponentKind::Animation,
    ComponentKind::Sound,
    ComponentKind::Texture,
    ComponentKind::Script,
    ComponentKind::Other,
];

pub fn generate_corpus(params: &CorpusParams) -> Vec<ObjectContent> {
    let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
    (0..params.objects as u64)
        .map(|key| ObjectContent {
            key,
            components: (0..params.components_per_object as u64)
                .map(|ckey| {
                    let kind = KINDS[ckey as usize % KINDS.len()];
                    let files = (0..params.files_per_component)
                        .map(|_| (0..params.file_len).map(|_| rng.gen::<u8>()).collect())
                        .collect();
                    (ckey, kind, files)
                })
                .collect(),
        })
        .collect()
}

/// Flip one byte in `count` distinct files chosen uniformly at random.
pub fn mutate_files(corpus: &mut [ObjectContent], count: usize, seed: u64) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut slots: Vec<(usize, usize, usize)> = Vec::new();
    for (oi, obj) in corpus.iter().enumerate() {
        for (ci, (_, _, files)) in obj.components.iter().enumerate() {
            for fi in 0..files.len() {
                slots.push((oi, ci, fi));
            }
        }
    }
    for _ in 0..count.min(slots.len()) {
        let pick = rng.gen_range(0..slots.len());
        let (oi, ci, fi) = slots.swap_remove(pick);
        let file = &mut corpus[oi].components[ci].2[fi];
        let byte = rng.gen_range(0..file.len());
        file[byte] ^= 1 + rng.gen::<u8>() % 255;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::{build_tree, Sha256Hasher};

    #[test]
    fn paper_scale_corpus_builds() {
        // 200 objects and more than 5,000 files.
        let params = CorpusParams::default();
        let corpus = generate_corpus(&params);
        let tree = build_tree::<Sha256Hasher>(b"user", &corpus);
        assert_eq!(tree.objects.len(), 200);
        assert!(tree.file_count() >= 5000);
    }

    #[test]
    fn mutation_changes_exactly_the_requested_files() {
        let params = CorpusParams {
            objects: 4,
            components_per_object: 2,
            files_per_component: 3,
            file_len: 16,
            seed: 1,
        };
        let base = generate_corpus(&params);
        let mut mutated = base.clone();
        mutate_files(&mut mutated, 5, 99);
        let mut diff = 0;
        for (a, b) in base.iter().zip(&mutated) {
            for ((_, _, fa), (_, _, fb)) in a.components.iter().zip(&b.components) {
                for (x, y) in fa.iter().zip(fb) {
                    if x != y {
                        diff += 1;
                    }
                }
            }
        }
        assert_eq!(diff, 5);
    }
}
