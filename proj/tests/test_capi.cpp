// C API: status codes, last_error, handle round trips. Links only libbimors.

#include "bimors/bimors.h"

#include "doctest.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>
#include <unistd.h>

namespace fs = std::filesystem;

namespace {

struct Scratch {
    fs::path path;
    explicit Scratch(const std::string& tag) {
        path = fs::temp_directory_path() / ("bimors_capi_" + tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~Scratch() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

std::string slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

bimors_encoder* tiny_encoder() {
    bimors_encoder_dims dims{64, 16, 16, 2, 1, 0};
    bimors_encoder* e = nullptr;
    REQUIRE(bimors_encoder_random(&dims, 3, &e) == BIMORS_OK);
    return e;
}

void write_dataset(const bimors_encoder* enc, const std::string& dir, uint32_t classes) {
    bimors_synthetic_spec spec;
    bimors_synthetic_spec_default(&spec);
    spec.name = "capi";
    spec.classes = classes;
    spec.records_per_class = 10;
    REQUIRE(bimors_synthetic_write(enc, &spec, dir.c_str()) == BIMORS_OK);
}

} // namespace

TEST_CASE("status names and version") {
    CHECK(std::string(bimors_version()) == "0.1.0");
    CHECK(std::string(bimors_status_name(BIMORS_OK)) == "ok");
    CHECK(std::string(bimors_status_name(BIMORS_E_CHECKSUM)) == "checksum");
    CHECK(std::string(bimors_status_name(BIMORS_E_MISSING_TENSOR)) == "missing_tensor");
    CHECK(std::string(bimors_status_name(999)) == "unknown");
}

TEST_CASE("null arguments are rejected with a message") {
    bimors_dataset* d = nullptr;
    CHECK(bimors_dataset_open(nullptr, &d) == BIMORS_E_INVALID_ARGUMENT);
    CHECK(std::strlen(bimors_last_error()) > 0);
    CHECK(bimors_dataset_open("x", nullptr) == BIMORS_E_INVALID_ARGUMENT);
    bimors_train_config c;
    bimors_train_config_default(&c);
    CHECK(bimors_train(nullptr, nullptr, &c, nullptr, nullptr, nullptr, nullptr, nullptr) == BIMORS_E_INVALID_ARGUMENT);
    // free functions accept null
    bimors_dataset_free(nullptr);
    bimors_report_free(nullptr);
}

TEST_CASE("errors map to status codes") {
    Scratch tmp("errors");
    bimors_dataset* d = nullptr;
    CHECK(bimors_dataset_open((tmp / "missing").c_str(), &d) == BIMORS_E_IO);
    CHECK(d == nullptr);
    CHECK(std::string(bimors_last_error()).find("manifest") != std::string::npos);

    bimors_encoder* enc = tiny_encoder();
    write_dataset(enc, tmp / "ds", 4);
    {
        // flip one payload byte near the end of the record blob
        const std::string blob = tmp / "ds/records.bmrs";
        const auto at = static_cast<std::streamoff>(fs::file_size(blob)) - 2;
        std::fstream f(blob, std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(at);
        char c;
        f.read(&c, 1);
        f.seekp(at);
        c ^= 0x5a;
        f.write(&c, 1);
    }
    CHECK(bimors_dataset_open((tmp / "ds").c_str(), &d) == BIMORS_E_CHECKSUM);

    bimors_train_config c;
    bimors_train_config_default(&c);
    c.temperature = 0;
    CHECK(bimors_train_config_validate(&c) == BIMORS_E_VALIDATION);
    int mode = -1;
    CHECK(bimors_mode_parse("no_ca", &mode) == BIMORS_OK);
    CHECK(mode == BIMORS_MODE_NO_CA);
    CHECK(bimors_mode_parse("bogus", &mode) == BIMORS_E_INVALID_ARGUMENT);

    bimors_encoder* e2 = nullptr;
    CHECK(bimors_encoder_load((tmp / "nope.bmtw").c_str(), (tmp / "nope.cfg").c_str(), &e2) == BIMORS_E_IO);
    uint64_t n = 0;
    CHECK(bimors_param_count(4, 4, 6, 4, 1, &n) == BIMORS_E_VALIDATION);  // 6 % 4 != 0
    bimors_encoder_free(enc);
}

TEST_CASE("parameter count matches the formula") {
    uint64_t n = 0;
    REQUIRE(bimors_param_count(768, 768, 512, 4, 4, &n) == BIMORS_OK);
    CHECK(n == 2101760);
    REQUIRE(bimors_param_count(4, 4, 2, 1, 1, &n) == BIMORS_OK);
    CHECK(n == 48);
}

TEST_CASE("end-to-end through handles") {
    Scratch tmp("e2e");
    bimors_encoder* enc = tiny_encoder();
    REQUIRE(bimors_encoder_save(enc, (tmp / "enc.bmtw").c_str(), (tmp / "enc.cfg").c_str()) == BIMORS_OK);
    bimors_encoder* enc2 = nullptr;
    REQUIRE(bimors_encoder_load((tmp / "enc.bmtw").c_str(), (tmp / "enc.cfg").c_str(), &enc2) == BIMORS_OK);
    bimors_encoder_dims dims;
    REQUIRE(bimors_encoder_dims_of(enc2, &dims) == BIMORS_OK);
    CHECK(dims.width == 16);
    CHECK(dims.vocab_size == 64);

    write_dataset(enc2, tmp / "ds", 6);
    bimors_dataset* ds = nullptr;
    REQUIRE(bimors_dataset_open((tmp / "ds").c_str(), &ds) == BIMORS_OK);
    bimors_dataset_info info;
    REQUIRE(bimors_dataset_info_of(ds, &info) == BIMORS_OK);
    CHECK(info.records == 60);
    CHECK(info.classes == 6);
    char hex[65];
    REQUIRE(bimors_sha256_file((tmp / "ds/records.bmrs").c_str(), hex) == BIMORS_OK);
    CHECK(std::string(hex) == info.blob_sha256);

    bimors_split* split = nullptr;
    REQUIRE(bimors_split_make(ds, BIMORS_B2N, 1, 4, nullptr, &split) == BIMORS_OK);
    CHECK(bimors_split_train_size(split) == 12);
    REQUIRE(bimors_split_save(split, (tmp / "split.txt").c_str()) == BIMORS_OK);
    bimors_split* split2 = nullptr;
    REQUIRE(bimors_split_load((tmp / "split.txt").c_str(), &split2) == BIMORS_OK);
    CHECK(bimors_split_seed(split2) == 1);
    CHECK(bimors_split_regime(split2) == BIMORS_B2N);

    bimors_train_config cfg;
    bimors_train_config_default(&cfg);
    cfg.epochs = 2;
    cfg.shots = 4;
    cfg.seed = 1;
    std::size_t calls = 0;
    auto progress = [](const bimors_log_entry*, void* user) { ++*static_cast<std::size_t*>(user); };
    bimors_head* head = nullptr;
    bimors_train_log* log = nullptr;
    REQUIRE(bimors_train(ds, split2, &cfg, enc2, progress, &calls, &head, &log) == BIMORS_OK);
    CHECK(bimors_train_log_size(log) == 6);  // 12 records / batch 4, 2 epochs
    CHECK(calls == 6);
    bimors_log_entry entry;
    CHECK(bimors_train_log_entry(log, 6, &entry) == BIMORS_E_INDEX);
    REQUIRE(bimors_train_log_entry(log, 5, &entry) == BIMORS_OK);
    CHECK(entry.step == 5);
    CHECK(entry.epoch == 1);

    REQUIRE(bimors_head_save(head, (tmp / "head.bmtw").c_str()) == BIMORS_OK);
    bimors_head* head2 = nullptr;
    REQUIRE(bimors_head_load((tmp / "head.bmtw").c_str(), &head2) == BIMORS_OK);
    CHECK(bimors_head_mode(head2) == BIMORS_MODE_FULL);
    uint64_t expect = 0;
    REQUIRE(bimors_param_count(info.d_vis, info.d_cap, dims.width, cfg.heads, cfg.m, &expect) == BIMORS_OK);
    CHECK(bimors_head_param_count(head2) == expect);

    // the loaded head evaluates exactly like the trained one
    const uint64_t seeds[] = {1};
    const bimors_split* sp[] = {split2};
    const bimors_head* h1[] = {head};
    const bimors_head* h2[] = {head2};
    bimors_report* r1 = nullptr;
    bimors_report* r2 = nullptr;
    REQUIRE(bimors_eval_b2n(ds, sp, h1, seeds, 1, enc2, cfg.temperature, "a", &r1) == BIMORS_OK);
    REQUIRE(bimors_eval_b2n(ds, sp, h2, seeds, 1, enc2, cfg.temperature, "a", &r2) == BIMORS_OK);
    CHECK(std::string(bimors_report_kv(r1)) == bimors_report_kv(r2));
    double h = -1;
    REQUIRE(bimors_report_value(r1, "average.h", &h) == BIMORS_OK);
    CHECK(h >= 0.0);
    CHECK(h <= 100.0);
    CHECK(bimors_report_value(r1, "no.such.key", &h) == BIMORS_E_INDEX);
    CHECK(std::string(bimors_report_basename(r1)) == "report_B2N_capi_seed1");
    REQUIRE(bimors_report_write(r1, tmp.path.string().c_str()) == BIMORS_OK);
    CHECK(slurp(tmp / "report_B2N_capi_seed1.kv") == bimors_report_kv(r1));

    // zero-shot: null head entries
    const bimors_head* none[] = {nullptr};
    bimors_report* r3 = nullptr;
    REQUIRE(bimors_eval_b2n(ds, sp, none, seeds, 1, enc2, cfg.temperature, "zs", &r3) == BIMORS_OK);

    // a transfer split against a B2N evaluation is a protocol error
    bimors_split* cd = nullptr;
    REQUIRE(bimors_split_make(ds, BIMORS_CD, 1, 4, nullptr, &cd) == BIMORS_OK);
    const bimors_split* cdp[] = {cd};
    bimors_report* bad = nullptr;
    CHECK(bimors_eval_b2n(ds, cdp, h1, seeds, 1, enc2, cfg.temperature, "x", &bad) != BIMORS_OK);
    CHECK(bad == nullptr);

    bimors_report_free(r1);
    bimors_report_free(r2);
    bimors_report_free(r3);
    bimors_split_free(cd);
    bimors_head_free(head);
    bimors_head_free(head2);
    bimors_train_log_free(log);
    bimors_split_free(split);
    bimors_split_free(split2);
    bimors_dataset_free(ds);
    bimors_encoder_free(enc);
    bimors_encoder_free(enc2);
}

TEST_CASE("train config file overlays defaults") {
    Scratch tmp("cfg");
    bimors_train_config c;
    bimors_train_config_default(&c);
    c.epochs = 7;
    c.mode = BIMORS_MODE_TEXT_ONLY;
    REQUIRE(bimors_train_config_save(&c, (tmp / "c.kv").c_str()) == BIMORS_OK);
    bimors_train_config d;
    bimors_train_config_default(&d);
    REQUIRE(bimors_train_config_load((tmp / "c.kv").c_str(), &d) == BIMORS_OK);
    CHECK(d.epochs == 7);
    CHECK(d.mode == BIMORS_MODE_TEXT_ONLY);
    {
        std::ofstream f(tmp / "bad.kv");
        f << "epochs=abc\n";
    }
    CHECK(bimors_train_config_load((tmp / "bad.kv").c_str(), &d) != BIMORS_OK);
}

TEST_CASE("gradcheck through the C API") {
    bimors_report* r = nullptr;
    int passed = 0;
    REQUIRE(bimors_gradcheck(-1.0, nullptr, &r, &passed) == BIMORS_OK);
    CHECK(passed == 1);
    double v = 0;
    REQUIRE(bimors_report_value(r, "passed", &v) == BIMORS_OK);
    CHECK(v == 1.0);
    bimors_report_free(r);
    REQUIRE(bimors_gradcheck(-1.0, "matmul", &r, &passed) == BIMORS_OK);
    CHECK(passed == 0);
    CHECK(std::string(bimors_report_kv(r)).find("matmul") != std::string::npos);
    bimors_report_free(r);
}

TEST_CASE("parity through the C API") {
    Scratch tmp("parity");
    bimors_encoder* enc = tiny_encoder();
    REQUIRE(bimors_reference_write(enc, 4, 9, (tmp / "ref.bmtw").c_str()) == BIMORS_OK);
    CHECK(bimors_reference_write(enc, 0, 9, (tmp / "none.bmtw").c_str()) == BIMORS_E_INVALID_ARGUMENT);
    bimors_report* r = nullptr;
    int passed = 0;
    REQUIRE(bimors_parity(enc, (tmp / "ref.bmtw").c_str(), 0.999, &r, &passed) == BIMORS_OK);
    CHECK(passed == 1);
    double worst = 0;
    REQUIRE(bimors_report_value(r, "worst_cosine", &worst) == BIMORS_OK);
    CHECK(worst > 0.999999);
    bimors_report_free(r);
    CHECK(bimors_parity(enc, (tmp / "absent.bmtw").c_str(), 0.999, &r, &passed) == BIMORS_E_IO);
    bimors_encoder_free(enc);
}
