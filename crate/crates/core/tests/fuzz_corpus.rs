//! Replays the fuzz corpus seeds through each decoder.

use std::path::PathBuf;

use colmatch::ablation::{parse_runs, ExperimentGrid};
use colmatch::augment::{parse_augmentation_response, parse_classes};
use colmatch::embedding::{decode_cache, decode_embed_response};
use colmatch::finetune::ProjectionHead;
use colmatch::llm::{decode_chat_response, parse_transcript};
use colmatch::llm_rerank::parse_response;
use colmatch::pipeline::PipelineConfig;
use colmatch::retrieval::MatchList;
use colmatch::table::{parse_ground_truth, parse_table};

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Runs `decode` on every seed; seeds named `bad*`, `unknown*` or `overflow*`
/// must be rejected, the rest accepted.
fn replay<T, E: std::fmt::Debug>(target: &str, decode: impl Fn(&[u8]) -> Result<T, E>) {
    for (name, bytes) in seeds(target) {
        let rejected = ["bad", "unknown", "overflow", "empty"].iter().any(|p| name.starts_with(p));
        match decode(&bytes) {
            Ok(_) => assert!(!rejected, "{target}/{name} accepted"),
            Err(e) => assert!(rejected, "{target}/{name}: {e:?}"),
        }
    }
}

fn text(bytes: &[u8]) -> &str {
    std::str::from_utf8(bytes).unwrap()
}

#[test]
fn corpus_seeds_decode() {
    replay("parse_table", |b| parse_table("seed", b));
    replay("parse_ground_truth", parse_ground_truth);
    replay("parse_response", |b| parse_response(text(b)));
    replay("parse_augmentation_response", |b| parse_augmentation_response(text(b)));
    replay("decode_cache", decode_cache);
    replay("decode_embed_response", |b| decode_embed_response(&b[1..], (b[0] % 4) as usize, (b[0] / 4 % 8) as usize));
    replay("decode_projection_head", ProjectionHead::decode);
    replay("parse_classes", parse_classes);
    replay("experiment_grid", ExperimentGrid::from_json);
    replay("match_list", MatchList::from_json);
    replay("parse_transcript", parse_transcript);
    replay("decode_chat_response", decode_chat_response);
    replay("parse_runs", parse_runs);
    replay("pipeline_config", PipelineConfig::from_json);
}

#[test]
fn torn_checkpoint_keeps_intact_prefix() {
    let torn = seeds("parse_runs").into_iter().find(|(n, _)| n.starts_with("torn")).unwrap().1;
    let (records, intact) = parse_runs(&torn).unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(torn[intact - 1], b'\n');
}
