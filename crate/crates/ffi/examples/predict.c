/* Loads a model.bin and classifies one all-zero image.
 *
 *   cargo build --release -p hff-ffi
 *   cc crates/ffi/examples/predict.c -Icrates/ffi/include \
 *      -Ltarget/release -lhff_ffi -o predict
 *   LD_LIBRARY_PATH=target/release ./predict model.bin
 */
#include <stdio.h>
#include <stdlib.h>

#include "hff.h"

static int fail(const char *what, HffStatus s) {
    const char *msg = hff_last_error();
    fprintf(stderr, "%s failed (%d): %s\n", what, (int)s, msg ? msg : "");
    return 1;
}

int main(int argc, char **argv) {
    if (argc != 2) {
        fprintf(stderr, "usage: %s MODEL\n", argv[0]);
        return 2;
    }
    HffModel *model = NULL;
    HffStatus s = hff_model_load(argv[1], &model);
    if (s != HFF_STATUS_OK) return fail("load", s);

    size_t classes = 0, layers = 0, width = 0;
    hff_model_num_classes(model, &classes);
    hff_model_num_layers(model, &layers);
    hff_model_input_len(model, &width);

    float *pixels = calloc(width, sizeof *pixels);
    double *scores = calloc(classes, sizeof *scores);
    size_t label = 0;
    s = hff_model_predict(model, pixels, 1, &label);
    if (s != HFF_STATUS_OK) return fail("predict", s);
    s = hff_model_layer_scores(model, pixels, 1, layers - 1, scores, classes);
    if (s != HFF_STATUS_OK) return fail("layer_scores", s);

    printf("hff %s: %zu layers, %zu classes, predicted %zu\n", hff_version(), layers, classes, label);
    for (size_t c = 0; c < classes; c++) printf("  class %zu score %.4f\n", c, scores[c]);
    free(pixels);
    free(scores);
    hff_model_free(model);
    return 0;
}
