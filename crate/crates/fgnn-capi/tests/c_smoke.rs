//! Compiles and runs a small C program against the generated header
//! and the static library, proving the ABI and header agree.

use std::path::PathBuf;
use std::process::Command;

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include <string.h>
#include "fgnn.h"

int main(void) {
    FgnnDataset *dataset = NULL;
    FgnnStatus status = fgnn_dataset_synth(25, 300, 3, 8, 0.1, 5, 0.1, &dataset);
    if (status != FGNN_STATUS_OK) {
        fprintf(stderr, "synth: %s\n", fgnn_last_error_message());
        return 1;
    }

    FgnnDatasetStats stats;
    if (fgnn_dataset_stats(dataset, &stats) != FGNN_STATUS_OK) return 2;
    if (stats.items == 0 || stats.train_examples == 0) return 3;

    FgnnTrainOptions options;
    fgnn_train_options_default(&options);
    options.epochs = 1;
    options.batch_size = 64;
    options.embed_dim = 8;
    options.layers = 1;
    options.heads = 2;
    options.readout_steps = 2;

    FgnnModel *model = NULL;
    status = fgnn_train(dataset, &options, &model);
    if (status != FGNN_STATUS_OK) {
        fprintf(stderr, "train: %s\n", fgnn_last_error_message());
        return 4;
    }

    uint32_t prefix[2] = {0, 1};
    uint32_t top[5];
    double probabilities[5];
    status = fgnn_predict_topk(model, prefix, 2, 5, top, probabilities);
    if (status != FGNN_STATUS_OK) return 5;
    for (int i = 1; i < 5; i++) {
        if (probabilities[i] > probabilities[i - 1]) return 6;
    }

    double recall = 0.0, mrr = 0.0;
    if (fgnn_evaluate(model, dataset, 10, &recall, &mrr) != FGNN_STATUS_OK) return 7;
    if (mrr > recall) return 8;

    fgnn_model_free(model);
    fgnn_dataset_free(dataset);
    printf("c-smoke ok: items=%llu recall@10=%.4f mrr@10=%.4f\n",
           (unsigned long long)stats.items, recall, mrr);
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let include_dir = manifest.join("include");
    assert!(
        include_dir.join("fgnn.h").exists(),
        "header should be generated by the build script"
    );
    let target_dir = std::env::var("CARGO_TARGET_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| manifest.join("../../target"));
    let archive = target_dir.join("debug/libfgnn_capi.a");
    assert!(
        archive.exists(),
        "static library missing at {}",
        archive.display()
    );

    let dir = tempfile::tempdir().unwrap();
    let source = dir.path().join("smoke.c");
    std::fs::write(&source, C_PROGRAM).unwrap();
    let binary = dir.path().join("smoke");

    let compile = Command::new("cc")
        .arg(&source)
        .arg("-I")
        .arg(&include_dir)
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&binary)
        .output()
        .expect("cc should be available");
    assert!(
        compile.status.success(),
        "compile failed:\n{}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let run = Command::new(&binary).output().expect("run smoke binary");
    assert!(
        run.status.success(),
        "smoke binary exited {:?}:\n{}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("c-smoke ok"), "stdout: {stdout}");
}
