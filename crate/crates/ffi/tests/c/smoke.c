#include <stdio.h>
#include <stdlib.h>
#include "optprop.h"

#define CHECK(call)                                                     \
    do {                                                                \
        OptpropStatus s_ = (call);                                      \
        if (s_ != OPTPROP_STATUS_OK) {                                  \
            fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,     \
                    optprop_last_error());                              \
            return 1;                                                   \
        }                                                               \
    } while (0)

int main(void) {
    OptpropSbmConfig cfg = optprop_sbm_config_default();
    cfg.n = 80;
    cfg.train_per_class = 5;
    cfg.seed = 7;

    OptpropDataset *ds = NULL;
    OptpropMatrix *q = NULL;
    OptpropLearned *learned = NULL;
    OptpropModel *model = NULL;
    CHECK(optprop_dataset_generate_sbm(&cfg, &ds));
    CHECK(optprop_ppr(ds, 0.1, &q));

    OptpropLowerParams lower = optprop_lower_params_default();
    lower.max_iters = 20;
    CHECK(optprop_learn(ds, q, OPTPROP_METHOD_LOW_RANK, &lower, 1, &learned));

    OptpropClassifierParams cls = optprop_classifier_params_default();
    cls.epochs = 50;
    OptpropMetrics m;
    CHECK(optprop_train(ds, learned, &cls, 1, &m, &model));

    size_t n = optprop_dataset_num_nodes(ds);
    size_t *labels = malloc(n * sizeof(size_t));
    CHECK(optprop_model_predict(model, ds, learned, cls.alpha, labels, n));
    for (size_t i = 0; i < n; i++) {
        if (labels[i] >= optprop_dataset_num_classes(ds)) return 2;
    }

    if (optprop_dataset_load(NULL, &ds) != OPTPROP_STATUS_INVALID_ARGUMENT) return 3;
    if (optprop_last_error() == NULL) return 4;

    printf("test_accuracy %.4f\n", m.test_accuracy);
    free(labels);
    optprop_model_free(model);
    optprop_learned_free(learned);
    optprop_matrix_free(q);
    optprop_dataset_free(ds);
    return 0;
}
