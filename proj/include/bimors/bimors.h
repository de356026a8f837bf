/* BiMoRS prompt learning: C interface.
 *
 * Every function returning int returns a bimors_status. On failure the
 * message is kept per thread and can be read with bimors_last_error() until
 * the next failing call on that thread. Handles are opaque and owned by the
 * caller; each has a matching _free function that accepts NULL.
 */
#ifndef BIMORS_BIMORS_H
#define BIMORS_BIMORS_H

#include <stddef.h>
#include <stdint.h>

#if defined(BIMORS_BUILDING_LIBRARY)
#define BIMORS_API __attribute__((visibility("default")))
#else
#define BIMORS_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum bimors_status {
    BIMORS_OK = 0,
    BIMORS_E_INVALID_ARGUMENT = 1,
    BIMORS_E_IO = 2,
    BIMORS_E_FORMAT = 3,
    BIMORS_E_VERSION = 4,
    BIMORS_E_TRUNCATED = 5,
    BIMORS_E_CHECKSUM = 6,
    BIMORS_E_VALIDATION = 7,
    BIMORS_E_SHAPE = 8,
    BIMORS_E_INDEX = 9,
    BIMORS_E_PROTOCOL = 10,
    BIMORS_E_SPLIT = 11,
    BIMORS_E_CONTRACT = 12,
    BIMORS_E_MISSING_TENSOR = 13,
    BIMORS_E_EXTRA_TENSOR = 14,
    BIMORS_E_LENGTH = 15,
    BIMORS_E_INTERNAL = 16
} bimors_status;

typedef enum bimors_regime { BIMORS_B2N = 0, BIMORS_CD = 1, BIMORS_SSMT = 2 } bimors_regime;

typedef enum bimors_mode {
    BIMORS_MODE_FULL = 0,
    BIMORS_MODE_VISUAL_ONLY = 1,
    BIMORS_MODE_TEXT_ONLY = 2,
    BIMORS_MODE_NO_CA = 3
} bimors_mode;

typedef struct bimors_encoder bimors_encoder;
typedef struct bimors_dataset bimors_dataset;
typedef struct bimors_split bimors_split;
typedef struct bimors_head bimors_head;
typedef struct bimors_train_log bimors_train_log;
typedef struct bimors_report bimors_report;

BIMORS_API const char* bimors_version(void);
BIMORS_API const char* bimors_status_name(int status);
BIMORS_API const char* bimors_last_error(void);

/* Worker threads for per-class encoding and evaluation; 0 means 1. */
BIMORS_API void bimors_set_threads(unsigned threads);
BIMORS_API unsigned bimors_threads(void);

/* out must hold 65 bytes. */
BIMORS_API int bimors_sha256_file(const char* path, char* out);

/* ---- frozen text encoder ---- */

typedef struct bimors_encoder_dims {
    uint32_t vocab_size;
    uint32_t context_length;
    uint32_t width;
    uint32_t heads;
    uint32_t layers;
    uint32_t embed_out_dim;
} bimors_encoder_dims;

/* Weights container plus its key=value config sidecar. */
BIMORS_API int bimors_encoder_load(const char* weights_path, const char* config_path, bimors_encoder** out);
BIMORS_API int bimors_encoder_save(const bimors_encoder* encoder, const char* weights_path, const char* config_path);
/* Small random encoder for synthetic runs (specials at the top of the vocab). */
BIMORS_API int bimors_encoder_random(const bimors_encoder_dims* dims, uint64_t seed, bimors_encoder** out);
BIMORS_API int bimors_encoder_dims_of(const bimors_encoder* encoder, bimors_encoder_dims* out);
BIMORS_API void bimors_encoder_free(bimors_encoder* encoder);

/* ---- feature datasets ---- */

typedef struct bimors_dataset_info {
    const char* name; /* valid while the handle lives */
    uint64_t records;
    uint32_t classes;
    uint32_t shared_classes;
    uint32_t d_vis;
    uint32_t d_clip;
    uint32_t d_cap;
    const char* blob_sha256;
} bimors_dataset_info;

/* Opens and fully validates a dataset directory (manifest + record blob). */
BIMORS_API int bimors_dataset_open(const char* dir, bimors_dataset** out);
BIMORS_API int bimors_dataset_info_of(const bimors_dataset* dataset, bimors_dataset_info* out);
BIMORS_API void bimors_dataset_free(bimors_dataset* dataset);

typedef struct bimors_synthetic_spec {
    const char* name;
    uint32_t classes;
    uint32_t records_per_class;
    uint32_t visual_tokens;
    uint32_t caption_tokens;
    uint32_t d_vis;
    uint32_t d_cap;
    uint32_t class_tokens;
    float feature_noise;
    float embed_noise;
    uint64_t world_seed;
    uint64_t sample_seed;
    float domain_shift;
    int alternate_captions;
    /* optional shared class ids for SSMT-style targets */
    const uint32_t* shared_class_ids;
    size_t shared_count;
} bimors_synthetic_spec;

BIMORS_API void bimors_synthetic_spec_default(bimors_synthetic_spec* spec);
/* Generates records whose global embeddings come from `encoder` and writes
 * them as a dataset directory. */
BIMORS_API int bimors_synthetic_write(const bimors_encoder* encoder, const bimors_synthetic_spec* spec, const char* out_dir);

/* ---- splits ---- */

/* B2N: alphabetical class halves; CD/SSMT: all (or shared) source classes.
 * target_name is recorded for transfer splits and may be NULL. */
BIMORS_API int bimors_split_make(const bimors_dataset* dataset, int regime, uint64_t seed, uint32_t shots,
                                 const char* target_name, bimors_split** out);
BIMORS_API int bimors_split_load(const char* path, bimors_split** out);
BIMORS_API int bimors_split_save(const bimors_split* split, const char* path);
BIMORS_API int bimors_split_regime(const bimors_split* split);
BIMORS_API uint64_t bimors_split_seed(const bimors_split* split);
BIMORS_API size_t bimors_split_train_size(const bimors_split* split);
BIMORS_API void bimors_split_free(bimors_split* split);

/* ---- training ---- */

typedef struct bimors_train_config {
    uint32_t epochs;
    uint32_t batch_size;
    double lr;
    double warmup_lr;
    uint32_t warmup_epochs;
    double temperature;
    uint32_t shots;
    uint64_t seed;
    int mode; /* bimors_mode */
    double momentum;
    double weight_decay;
    uint32_t heads;
    uint32_t m;
} bimors_train_config;

BIMORS_API void bimors_train_config_default(bimors_train_config* config);
/* Overlays the keys of a key=value file onto *config; unknown keys fail. */
BIMORS_API int bimors_train_config_load(const char* path, bimors_train_config* config);
BIMORS_API int bimors_train_config_save(const bimors_train_config* config, const char* path);
BIMORS_API int bimors_train_config_validate(const bimors_train_config* config);
BIMORS_API const char* bimors_mode_name(int mode);
BIMORS_API int bimors_mode_parse(const char* text, int* mode);

typedef struct bimors_log_entry {
    uint64_t step;
    uint32_t epoch;
    double lr;
    double loss;
} bimors_log_entry;

typedef void (*bimors_progress_fn)(const bimors_log_entry* entry, void* user);

/* Trains a fresh head on the split's training pool. progress may be NULL. */
BIMORS_API int bimors_train(const bimors_dataset* dataset, const bimors_split* split, const bimors_train_config* config,
                            const bimors_encoder* encoder, bimors_progress_fn progress, void* user, bimors_head** head,
                            bimors_train_log** log);
BIMORS_API size_t bimors_train_log_size(const bimors_train_log* log);
BIMORS_API int bimors_train_log_entry(const bimors_train_log* log, size_t index, bimors_log_entry* out);
BIMORS_API int bimors_train_log_save(const bimors_train_log* log, const char* path);
BIMORS_API void bimors_train_log_free(bimors_train_log* log);

BIMORS_API int bimors_head_save(const bimors_head* head, const char* path);
BIMORS_API int bimors_head_load(const char* path, bimors_head** out);
BIMORS_API int bimors_head_mode(const bimors_head* head);
BIMORS_API uint64_t bimors_head_param_count(const bimors_head* head);
BIMORS_API void bimors_head_free(bimors_head* head);

/* Analytic trainable-parameter count of a head with these dimensions. */
BIMORS_API int bimors_param_count(uint32_t d_vis, uint32_t d_cap, uint32_t d, uint32_t heads, uint32_t m, uint64_t* out);

/* ---- evaluation ---- */

/* One split and one head per seed. A NULL head selects the zero-shot
 * template prompt. */
BIMORS_API int bimors_eval_b2n(const bimors_dataset* dataset, const bimors_split* const* splits,
                               const bimors_head* const* heads, const uint64_t* seeds, size_t seed_count,
                               const bimors_encoder* encoder, double temperature, const char* label, bimors_report** out);
/* regime is BIMORS_CD or BIMORS_SSMT; one report row per target. */
BIMORS_API int bimors_eval_transfer(const bimors_dataset* const* targets, size_t target_count, int regime,
                                    const bimors_head* const* heads, const uint64_t* seeds, size_t seed_count,
                                    const bimors_encoder* encoder, double temperature, const char* label,
                                    bimors_report** out);
/* Trains and evaluates all four context modes per seed; alternate may be NULL. */
BIMORS_API int bimors_ablate(const bimors_dataset* dataset, const bimors_split* split, const bimors_train_config* config,
                             const uint64_t* seeds, size_t seed_count, const bimors_encoder* encoder,
                             const bimors_dataset* alternate, bimors_report** out);
/* tolerance < 0 keeps the defaults; corrupt_op (may be NULL) is a test hook
 * that breaks one op's backward. *passed is set to 1 or 0. */
BIMORS_API int bimors_gradcheck(double tolerance, const char* corrupt_op, bimors_report** out, int* passed);

/* Reference prompts (BMTW, "reference.<i>.token_ids" / ".embedding") as
 * emitted next to an exported text encoder. bimors_reference_write encodes
 * `count` random prompts with `encoder` itself; bimors_parity re-encodes a
 * reference set and passes when every cosine exceeds `threshold`. */
BIMORS_API int bimors_reference_write(const bimors_encoder* encoder, size_t count, uint64_t seed, const char* path);
BIMORS_API int bimors_parity(const bimors_encoder* encoder, const char* reference_path, double threshold,
                             bimors_report** out, int* passed);

BIMORS_API const char* bimors_report_text(const bimors_report* report);
BIMORS_API const char* bimors_report_kv(const bimors_report* report);
BIMORS_API const char* bimors_report_basename(const bimors_report* report);
/* Numeric value of a key in the key=value form, e.g. "average.h". */
BIMORS_API int bimors_report_value(const bimors_report* report, const char* key, double* out);
/* Writes <basename>.txt and <basename>.kv into dir. */
BIMORS_API int bimors_report_write(const bimors_report* report, const char* dir);
BIMORS_API void bimors_report_free(bimors_report* report);

#ifdef __cplusplus
}
#endif

#endif
