use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use cgru::decoding::parse_nbest_line;
use cgru::viz::parse_attention;
use cgru_cli::{cmd_score, cmd_train, RunConfig};
use tempfile::TempDir;

fn cgru(args: &[&str], stdin: Option<&str>) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_cgru"))
        .args(args)
        .env("RUST_LOG", "warn")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let input = stdin.unwrap_or("").to_string();
    let mut pipe = child.stdin.take().unwrap();
    let writer = std::thread::spawn(move || pipe.write_all(input.as_bytes()));
    let out = child.wait_with_output().unwrap();
    writer.join().unwrap().unwrap();
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

const SOURCE: &str = "a b c\nb c\nc a d\nd\na a b\n";
const TARGET: &str = "A B C\nB C\nC A D\nD\nA A B\n";

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// A tiny config file pointing at a five-line corpus.
fn setup(dir: &Path, seed: u64) -> PathBuf {
    write(dir, "train.src", SOURCE);
    write(dir, "train.tgt", TARGET);
    let cfg = format!(
        r#"seed = {seed}
output_dir = "{out}"

[data]
train_source = "{dir}/train.src"
train_target = "{dir}/train.tgt"
valid_source = "{dir}/train.src"
valid_target = "{dir}/train.tgt"

[model]
factor_dims = [6]
target_embedding_dim = 6
encoder_dim = 6
decoder_dim = 6
attention_dim = 6
output_dim = 6

[training]
batch_size = 2
max_epochs = 2
valid_every = 3
"#,
        out = dir.join(format!("model{seed}")).display(),
        dir = dir.display()
    );
    write(dir, &format!("run{seed}.toml"), &cfg)
}

fn train(dir: &Path, seed: u64) -> PathBuf {
    let cfg = setup(dir, seed);
    let out = cgru(&["train", "--config", cfg.to_str().unwrap()], None);
    assert!(out.status.success(), "{}", stderr(&out));
    dir.join(format!("model{seed}"))
}

/// Minimal structural reading of the emitted DOT: every graph is a
/// `digraph { ... }` of node and edge statements, labels are properly
/// quoted, and the edges form a tree rooted at `n0`.
fn check_dot(text: &str) -> usize {
    let mut graphs = 0;
    let mut lines = text.lines().peekable();
    while let Some(line) = lines.next() {
        assert!(line.starts_with("digraph ") && line.ends_with('{'), "bad header {line:?}");
        graphs += 1;
        let mut nodes = HashSet::new();
        let mut parents: HashMap<String, String> = HashMap::new();
        for line in lines.by_ref() {
            let stmt = line.trim();
            if stmt == "}" {
                break;
            }
            assert!(stmt.ends_with(';'), "unterminated statement {stmt:?}");
            let body = &stmt[..stmt.len() - 1];
            let (head, attrs) = match body.find('[') {
                Some(i) => (body[..i].trim(), Some(&body[i..])),
                None => (body.trim(), None),
            };
            if let Some(a) = attrs {
                assert!(a.ends_with(']'), "unclosed attribute list {stmt:?}");
                let mut quoted = false;
                let mut escaped = false;
                for ch in a.chars() {
                    match (escaped, ch) {
                        (true, _) => escaped = false,
                        (false, '\\') => escaped = true,
                        (false, '"') => quoted = !quoted,
                        _ => {}
                    }
                }
                assert!(!quoted, "unbalanced quotes in {stmt:?}");
            }
            if let Some((from, to)) = head.split_once("->") {
                let (from, to) = (from.trim().to_string(), to.trim().to_string());
                assert!(nodes.contains(&from) && nodes.contains(&to), "edge to undeclared node {stmt:?}");
                assert!(parents.insert(to, from).is_none(), "node with two parents");
            } else if head == "node" || head.starts_with("rankdir") {
            } else {
                assert!(head.starts_with('n') && head[1..].parse::<usize>().is_ok(), "bad node id {head:?}");
                nodes.insert(head.to_string());
            }
        }
        assert!(nodes.contains("n0"));
        assert_eq!(parents.len(), nodes.len() - 1, "graph is not a tree");
    }
    graphs
}

#[test]
fn train_writes_checkpoints_vocabs_and_log() {
    let dir = TempDir::new().unwrap();
    let out = train(dir.path(), 1);
    for f in ["model.best.cgru", "model.final.cgru", "source.0.vocab", "target.vocab", "config.json", "train.log"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.lines().all(|l| l.split('\t').count() == 4));
    let snapshot: RunConfig = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(snapshot.seed, 1);
}

#[test]
fn translate_score_and_rescore_roundtrip() {
    let dir = TempDir::new().unwrap();
    let model = train(dir.path(), 2).join("model.best.cgru");
    let model = model.to_str().unwrap();
    let att = dir.path().join("att.tsv");
    let dot = dir.path().join("graph.dot");

    let out = cgru(&["translate", "--models", model, "--beam-size", "3"], Some(SOURCE));
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 5);

    let out = cgru(
        &[
            "translate",
            "--models",
            model,
            "--models",
            model,
            "--beam-size",
            "3",
            "--length-norm",
            "0.5",
            "--nbest",
            "--threads",
            "2",
            "--attention-out",
            att.to_str().unwrap(),
            "--graph-out",
            dot.to_str().unwrap(),
        ],
        Some(SOURCE),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let nbest = stdout(&out);
    let entries: Vec<_> = nbest.lines().enumerate().map(|(i, l)| parse_nbest_line(l, i + 1).unwrap()).collect();
    assert!(entries.iter().all(|e| e.features.len() == 2 && e.features[0] <= 0.0));
    let ids: HashSet<usize> = entries.iter().map(|e| e.sentence).collect();
    assert_eq!(ids, (0..5).collect());

    let tsv = fs::read_to_string(&att).unwrap();
    let blocks: Vec<&str> = tsv.split("\n\n").filter(|b| !b.trim().is_empty()).collect();
    assert_eq!(blocks.len(), 5);
    for (block, src) in blocks.iter().zip(SOURCE.lines()) {
        let (s, _, alpha) = parse_attention(&format!("{block}\n")).unwrap();
        assert_eq!(s.len(), src.split_whitespace().count() + 1);
        for row in alpha {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    assert_eq!(check_dot(&fs::read_to_string(&dot).unwrap()), 5);

    let nbest_file = write(dir.path(), "nbest.txt", &nbest);
    let src = dir.path().join("train.src");
    let out = cgru(
        &[
            "rescore",
            "--models",
            model,
            "--source",
            src.to_str().unwrap(),
            "--input",
            nbest_file.to_str().unwrap(),
            "--resort",
        ],
        None,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let rescored: Vec<_> = stdout(&out).lines().map(|l| parse_nbest_line(l, 0).unwrap()).collect();
    assert_eq!(rescored.len(), entries.len());
    assert!(rescored.iter().all(|e| e.features.len() == 3));

    let tgt = dir.path().join("train.tgt");
    let out = cgru(
        &["score", "--models", model, "--source", src.to_str().unwrap(), "--target", tgt.to_str().unwrap()],
        None,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let scores: Vec<f64> = stdout(&out).lines().map(|l| l.parse().unwrap()).collect();
    assert_eq!(scores.len(), 5);
    assert!(scores.iter().all(|&s| s < 0.0 && s.is_finite()));
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = cgru(&["train", "--output-dir", dir.path().to_str().unwrap()], None);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("missing training corpus"), "{}", stderr(&out));

    let mut config = RunConfig::default();
    config.data.train_source = Some(dir.path().join("nope.src"));
    config.data.train_target = Some(dir.path().join("nope.tgt"));
    let err = format!("{:#}", cmd_train(&config).unwrap_err());
    assert!(err.contains("nope.src"), "{err}");
}

#[test]
fn invalid_flags_and_config_fields_are_named() {
    let dir = TempDir::new().unwrap();
    let cfg = setup(dir.path(), 3);
    let out = cgru(&["train", "--config", cfg.to_str().unwrap(), "--objective", "bleu"], None);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--objective"), "{}", stderr(&out));

    let out = cgru(&["train", "--config", cfg.to_str().unwrap(), "--optimizer", "lbfgs"], None);
    assert!(stderr(&out).contains("--optimizer"), "{}", stderr(&out));

    let bad = write(dir.path(), "bad.toml", "[model]\nencoder_dims = 3\n");
    let out = cgru(&["train", "--config", bad.to_str().unwrap()], None);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("encoder_dims"), "{}", stderr(&out));
}

#[test]
fn scoring_empty_files_prints_nothing() {
    let dir = TempDir::new().unwrap();
    let model = train(dir.path(), 4).join("model.final.cgru");
    let empty_src = write(dir.path(), "empty.src", "");
    let empty_tgt = write(dir.path(), "empty.tgt", "");
    let mut out = Vec::new();
    cmd_score(std::slice::from_ref(&model), &empty_src, &empty_tgt, &mut out).unwrap();
    assert!(out.is_empty());

    let one = write(dir.path(), "one.tgt", "A\n");
    let err = cmd_score(&[model], &empty_src, &one, &mut Vec::new()).unwrap_err();
    assert!(format!("{err:#}").contains("line 1"), "{err:#}");
}

#[test]
fn ensembles_need_matching_vocabularies() {
    let dir = TempDir::new().unwrap();
    let a = train(dir.path(), 5).join("model.final.cgru");
    let other = dir.path().join("other");
    fs::create_dir(&other).unwrap();
    write(&other, "train.src", "x y\n");
    write(&other, "train.tgt", "X Y Z\n");
    let mut config = RunConfig::default();
    config.data.train_source = Some(other.join("train.src"));
    config.data.train_target = Some(other.join("train.tgt"));
    config.model.factor_dims = vec![4];
    config.model.target_embedding_dim = 4;
    config.model.encoder_dim = 4;
    config.model.decoder_dim = 4;
    config.model.attention_dim = 4;
    config.model.output_dim = 4;
    config.training.max_epochs = 1;
    config.output_dir = other.join("model");
    cmd_train(&config).unwrap();
    let b = other.join("model/model.final.cgru");
    let out = cgru(&["translate", "--models", a.to_str().unwrap(), b.to_str().unwrap()], Some("a b\n"));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("vocabulary mismatch"), "{}", stderr(&out));
}

#[test]
fn corrupt_archive_is_rejected() {
    let dir = TempDir::new().unwrap();
    let model = train(dir.path(), 6).join("model.final.cgru");
    let mut bytes = fs::read(&model).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&model, bytes).unwrap();
    let out = cgru(&["translate", "--models", model.to_str().unwrap()], Some("a\n"));
    assert!(!out.status.success());
    assert!(stderr(&out).contains("truncated"), "{}", stderr(&out));
}
