/* C interface to the da2net library.
 *
 * Every function returns a da2_status. On failure, da2_last_error() gives a
 * message for the calling thread until its next call into the library.
 * Strings returned through char** out-parameters are owned by the caller and
 * released with da2_string_free().
 */
#ifndef DA2NET_C_API_H
#define DA2NET_C_API_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DA2_API __declspec(dllexport)
#else
#define DA2_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum da2_status {
    DA2_OK = 0,
    DA2_ERR_CHECK = 1,    /* a verification ran and failed */
    DA2_ERR_CONFIG = 2,   /* invalid configuration or arguments */
    DA2_ERR_NUMERIC = 3,  /* non-finite loss or gradient */
    DA2_ERR_IO = 4,
    DA2_ERR_SHAPE = 5,
    DA2_ERR_FORMAT = 6,   /* malformed dataset or checkpoint bytes */
    DA2_ERR_STATE = 7,
    DA2_ERR_INTERNAL = 8,
    DA2_ERR_ARGUMENT = 9  /* null pointer or out-of-range argument */
} da2_status;

typedef struct da2_network da2_network;

DA2_API const char* da2_version(void);
DA2_API const char* da2_last_error(void);
DA2_API const char* da2_status_name(da2_status status);
DA2_API void da2_string_free(char* s);

/* Builds a network from a config file or preset name ("micro",
 * "resnet50_cifar", ...). overrides are "section.key=value" strings. The init
 * seed is train.seed. */
DA2_API da2_status da2_network_create(const char* arch, const char* const* overrides, size_t n_overrides,
                                      da2_network** out);
DA2_API da2_status da2_network_from_string(const char* config_text, const char* const* overrides,
                                           size_t n_overrides, da2_network** out);
DA2_API void da2_network_free(da2_network* net);

DA2_API da2_status da2_network_param_count(da2_network* net, int64_t* out);
DA2_API da2_status da2_network_num_classes(const da2_network* net, int64_t* out);
DA2_API da2_status da2_network_set_attention_enabled(da2_network* net, int enabled);

/* Eval-mode forward of an (n,c,h,w) float batch. logits must hold n*num_classes floats. */
DA2_API da2_status da2_network_forward(da2_network* net, const float* input, int64_t n, int64_t c, int64_t h,
                                       int64_t w, float* logits, size_t logits_len);

DA2_API da2_status da2_network_save(da2_network* net, const char* path);
DA2_API da2_status da2_network_load(da2_network* net, const char* path);

/* Cost report as a text table (json == 0) or JSON. input is "HxW" or
 * "NxCxHxW". A baseline comes from baseline_arch when non-null, otherwise
 * from the same architecture without attention when compare_without_attention
 * is non-zero. */
DA2_API da2_status da2_analyze(const char* arch, const char* const* overrides, size_t n_overrides,
                               const char* input, const char* baseline_arch, int compare_without_attention,
                               int json, char** report);

/* Validates the whole config, then trains and writes metrics.jsonl,
 * config.resolved.toml, final.da2c and best.da2c to output.dir. summary
 * receives a JSON object. */
DA2_API da2_status da2_train(const char* config_path, const char* const* overrides, size_t n_overrides,
                             char** summary);

/* Finite-difference gradient checks. Returns DA2_ERR_CHECK when any group
 * exceeds the tolerance; the JSON report is produced either way. corrupt_op
 * (nullable) deliberately breaks one op's gradient as a negative control. */
DA2_API da2_status da2_gradcheck(const char* scope, uint64_t seed, const char* corrupt_op, char** report);

/* Throughput benchmark. With compare_attention, the same network is timed
 * with attention disabled and enabled and the relative latency delta is
 * reported. */
DA2_API da2_status da2_bench(const char* arch, const char* const* overrides, size_t n_overrides, int64_t batch,
                             int64_t batches, int repeats, int warmup, int compare_attention, char** report);

#ifdef __cplusplus
}
#endif

#endif /* DA2NET_C_API_H */
