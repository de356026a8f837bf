// Drives the bimors executable: exit codes, outputs, run manifests and
// rerun determinism.

#include "support/fixtures.hpp"

#include "common/kv_text.hpp"
#include "common/sha256.hpp"

#include "doctest.h"

#include <algorithm>
#include <cstdlib>
#include <string>
#include <sys/wait.h>

#ifndef BIMORS_CLI_PATH
#error "BIMORS_CLI_PATH must point at the bimors executable"
#endif

using namespace bimors;
namespace fs = std::filesystem;

namespace {

struct Run {
    int code;
    std::string out;
    std::string err;
};

Run run_cli(const test::TempDir& tmp, const std::string& args) {
    static int n = 0;
    const auto out = tmp / ("stdout_" + std::to_string(n));
    const auto err = tmp / ("stderr_" + std::to_string(n++));
    const std::string cmd = std::string(BIMORS_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int raw = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(raw));
    return {WEXITSTATUS(raw), test::read_text(out), test::read_text(err)};
}

KvDocument manifest_of(const fs::path& dir) { return KvDocument::parse(test::read_text(dir / "run_manifest.txt")); }

// Dataset + encoder shared by the cases below.
struct World {
    test::TempDir tmp{"cli"};
    std::string data, enc;
    World() {
        const auto r = run_cli(tmp, "make-synthetic --out " + (tmp / "w").string() + " --classes 6 --records-per-class 10");
        REQUIRE(r.code == 0);
        data = (tmp / "w/synthetic").string();
        enc = (tmp / "w/encoder.bmtw").string();
    }
};

World& world() {
    static World w;
    return w;
}

} // namespace

TEST_CASE("usage errors exit 2") {
    test::TempDir tmp("cli_usage");
    auto r = run_cli(tmp, "");
    CHECK(r.code == 2);
    r = run_cli(tmp, "no-such-command");
    CHECK(r.code == 2);
    CHECK(r.err.find("train") != std::string::npos);  // usage lists the subcommands
    r = run_cli(tmp, "train --encoder x.bmtw");
    CHECK(r.code == 2);
    CHECK(r.err.find("--dataset") != std::string::npos);
    r = run_cli(tmp, "train --dataset d --encoder e --mode sideways");
    CHECK(r.code == 2);
    r = run_cli(tmp, "train --dataset d --encoder e --regime sideways");
    CHECK(r.code == 2);
    r = run_cli(tmp, "param-count --d 6 --heads 4");
    CHECK(r.code == 2);
}

TEST_CASE("help exits 0") {
    test::TempDir tmp("cli_help");
    const auto r = run_cli(tmp, "--help");
    CHECK(r.code == 0);
    CHECK(r.out.find("gradcheck") != std::string::npos);
}

TEST_CASE("runtime failures exit 1 and name the problem") {
    auto& w = world();
    auto r = run_cli(w.tmp, "ingest-validate --dataset " + (w.tmp / "absent").string());
    CHECK(r.code == 1);
    CHECK(r.err.find("manifest") != std::string::npos);
    r = run_cli(w.tmp, "ingest-validate --dataset " + w.data);
    CHECK(r.code == 0);
    CHECK(r.out.find("records=60") != std::string::npos);
}

TEST_CASE("config file overrides flags") {
    auto& w = world();
    {
        std::ofstream f(w.tmp / "train.kv");
        f << "epochs=2\nbatch_size=6\n";
    }
    const auto out = w.tmp / "cfg_run";
    const auto r = run_cli(w.tmp, "train --dataset " + w.data + " --encoder " + w.enc + " --epochs 5 --shots 4 --config " +
                                      (w.tmp / "train.kv").string() + " --out " + out.string());
    REQUIRE(r.code == 0);
    const auto m = manifest_of(out);
    CHECK(m.get("config.epochs") == "2");
    CHECK(m.get("config.batch_size") == "6");
    CHECK(m.get("flag.epochs") == "5");
    // 12 records in batches of 6 for 2 epochs
    const auto log = test::read_text(out / "train_log_seed1.tsv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 4);
}

TEST_CASE("train writes checksummed artifacts and reruns identically") {
    auto& w = world();
    const auto a = w.tmp / "run_a", b = w.tmp / "run_b";
    const std::string args = "train --dataset " + w.data + " --encoder " + w.enc + " --seed 1,2,3 --epochs 2 --shots 4 --out ";
    REQUIRE(run_cli(w.tmp, args + a.string()).code == 0);
    REQUIRE(run_cli(w.tmp, "--threads 3 " + args + b.string()).code == 0);
    const auto ma = manifest_of(a), mb = manifest_of(b);
    CHECK(ma.get("command") == "train");
    CHECK(ma.get("seeds") == "1,2,3");
    CHECK(ma.get("input.dataset.sha256").size() == 64);
    CHECK(mb.get("threads") == "3");
    const auto count = std::stoul(ma.get("artifact_count"));
    CHECK(count == 3 * 3 + 3);  // split, head, log per seed; config and two report files
    std::size_t compared = 0;
    for (const auto& [key, value] : ma.entries()) {
        if (key.rfind("artifact.", 0) != 0) continue;
        const auto file = key.substr(9);
        CHECK_MESSAGE(value == mb.get(key), file);
        CHECK(value == sha256_file(a / file));
        ++compared;
    }
    CHECK(compared == count);
    // distinct seeds give distinct heads
    CHECK(ma.get("artifact.head_seed1.bmtw") != ma.get("artifact.head_seed2.bmtw"));
    CHECK(ma.get("artifact.head_seed2.bmtw") != ma.get("artifact.head_seed3.bmtw"));

    // the saved checkpoints and splits reproduce the training report
    const auto e = w.tmp / "eval";
    const auto r = run_cli(w.tmp, "eval-b2n --dataset " + w.data + " --encoder " + w.enc + " --checkpoint " +
                                      (a / "head_seed1.bmtw").string() + "," + (a / "head_seed2.bmtw").string() + "," +
                                      (a / "head_seed3.bmtw").string() + " --split " + (a / "split_seed1.txt").string() + "," +
                                      (a / "split_seed2.txt").string() + "," + (a / "split_seed3.txt").string() + " --out " +
                                      e.string() + " --label full");
    REQUIRE(r.code == 0);
    const std::string report = "report_B2N_synthetic_seed1-2-3.kv";
    CHECK(test::read_text(e / report) == test::read_text(a / report));
}

TEST_CASE("cross-dataset and zero-shot commands") {
    auto& w = world();
    const auto t = w.tmp / "cd_train";
    REQUIRE(run_cli(w.tmp, "train --regime cd --dataset " + w.data + " --encoder " + w.enc +
                               " --epochs 1 --shots 2 --out " + t.string())
                .code == 0);
    CHECK(fs::exists(t / "report_CD_synthetic_seed1.kv"));
    auto r = run_cli(w.tmp, "eval-cd --target " + w.data + " --encoder " + w.enc + " --checkpoint " +
                                (t / "head_seed1.bmtw").string() + " --out " + (w.tmp / "cd_eval").string());
    REQUIRE(r.code == 0);
    // eval-cd with the implicit seed 1 matches the report written by train
    const auto kv_train = KvDocument::parse(test::read_text(t / "report_CD_synthetic_seed1.kv"));
    const auto kv_eval = KvDocument::parse(test::read_text(w.tmp / "cd_eval/report_CD_synthetic_seed1.kv"));
    CHECK(kv_train.get("average.target_acc") == kv_eval.get("average.target_acc"));

    r = run_cli(w.tmp, "eval-ssmt --target " + w.data + " --encoder " + w.enc + " --checkpoint " +
                           (t / "head_seed1.bmtw").string() + " --out " + (w.tmp / "ssmt").string());
    CHECK(r.code == 1);  // no shared_class_ids in this dataset
    r = run_cli(w.tmp, "zero-shot --dataset " + w.data + " --encoder " + w.enc + " --shots 2 --out " + (w.tmp / "zs").string());
    CHECK(r.code == 0);
    CHECK(r.out.find("zero-shot") != std::string::npos);
}

TEST_CASE("gradcheck exit codes") {
    test::TempDir tmp("cli_grad");
    auto r = run_cli(tmp, "gradcheck");
    CHECK(r.code == 0);
    CHECK(r.out.find("0 failing") != std::string::npos);
    r = run_cli(tmp, "gradcheck --tolerance 0");
    CHECK(r.code == 1);
    r = run_cli(tmp, "gradcheck --corrupt-op layernorm --out " + (tmp / "g").string());
    CHECK(r.code == 1);
    CHECK(manifest_of(tmp / "g").get("flag.corrupt-op") == "layernorm");
    CHECK(test::read_text(tmp / "g/gradcheck.kv").find("layernorm") != std::string::npos);
}

TEST_CASE("param-count prints the audit") {
    test::TempDir tmp("cli_params");
    const auto r = run_cli(tmp, "param-count");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("2101760") != std::string::npos);
    CHECK(r.out.find("1M") != std::string::npos);
}

TEST_CASE("ablate covers every mode") {
    auto& w = world();
    const auto out = w.tmp / "abl";
    const auto r = run_cli(w.tmp, "ablate --dataset " + w.data + " --encoder " + w.enc + " --seed 1 --epochs 1 --shots 2 --out " +
                                      out.string());
    REQUIRE(r.code == 0);
    for (const char* mode : {"full", "visual_only", "text_only", "no_ca"}) CHECK(r.out.find(mode) != std::string::npos);
    CHECK(fs::exists(out / "ablation_B2N_synthetic_seed1.kv"));
}

TEST_CASE("eval-b2n prints the table and rejects a transfer split") {
    auto& w = world();
    const auto t = w.tmp / "b2n_one";
    REQUIRE(run_cli(w.tmp, "train --dataset " + w.data + " --encoder " + w.enc + " --epochs 1 --shots 2 --out " + t.string())
                .code == 0);
    auto r = run_cli(w.tmp, "eval-b2n --dataset " + w.data + " --encoder " + w.enc + " --checkpoint " +
                                (t / "head_seed1.bmtw").string() + " --split " + (t / "split_seed1.txt").string() +
                                " --out " + (w.tmp / "b2n_eval").string());
    REQUIRE(r.code == 0);
    for (const char* col : {"Base", "New", " H"}) CHECK(r.out.find(col) != std::string::npos);

    const auto cd = w.tmp / "cd_one";
    REQUIRE(run_cli(w.tmp, "train --regime cd --dataset " + w.data + " --encoder " + w.enc + " --epochs 1 --shots 2 --out " +
                               cd.string())
                .code == 0);
    r = run_cli(w.tmp, "eval-b2n --dataset " + w.data + " --encoder " + w.enc + " --checkpoint " +
                           (t / "head_seed1.bmtw").string() + " --split " + (cd / "split_seed1.txt").string() + " --out " +
                           (w.tmp / "mismatch").string());
    CHECK(r.code == 1);
    CHECK(r.err.find("protocol") != std::string::npos);
}

TEST_CASE("commands leave their inputs untouched") {
    auto& w = world();
    const auto before_blob = sha256_file(fs::path(w.data) / "records.bmrs");
    const auto before_manifest = sha256_file(fs::path(w.data) / "manifest.txt");
    const auto before_enc = sha256_file(w.enc);
    const auto out = w.tmp / "untouched";
    REQUIRE(run_cli(w.tmp, "train --dataset " + w.data + " --encoder " + w.enc + " --epochs 1 --shots 2 --out " + out.string())
                .code == 0);
    REQUIRE(run_cli(w.tmp, "ablate --dataset " + w.data + " --encoder " + w.enc + " --epochs 1 --shots 2 --out " +
                               (w.tmp / "untouched_abl").string())
                .code == 0);
    CHECK(sha256_file(fs::path(w.data) / "records.bmrs") == before_blob);
    CHECK(sha256_file(fs::path(w.data) / "manifest.txt") == before_manifest);
    CHECK(sha256_file(w.enc) == before_enc);
    CHECK(manifest_of(out).get("input.dataset.sha256") == before_blob);
}

TEST_CASE("parity against reference prompts") {
    test::TempDir tmp("cli_parity");
    REQUIRE(run_cli(tmp, "make-synthetic --out " + (tmp / "a").string() + " --references 10").code == 0);
    REQUIRE(run_cli(tmp, "make-synthetic --out " + (tmp / "b").string() + " --encoder-seed 2").code == 0);
    const auto ref = (tmp / "a/reference.bmtw").string();
    CHECK(manifest_of(tmp / "a").has("artifact.reference.bmtw"));
    auto r = run_cli(tmp, "parity --encoder " + (tmp / "a/encoder.bmtw").string() + " --reference " + ref + " --out " +
                              (tmp / "pa").string());
    CHECK(r.code == 0);
    CHECK(KvDocument::load(tmp / "pa/parity.kv").get("count") == "10");
    r = run_cli(tmp, "parity --encoder " + (tmp / "b/encoder.bmtw").string() + " --reference " + ref + " --out " +
                         (tmp / "pb").string());
    CHECK(r.code == 1);
    r = run_cli(tmp, "parity --encoder " + (tmp / "a/encoder.bmtw").string());
    CHECK(r.code == 2);
}
