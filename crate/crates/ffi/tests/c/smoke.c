#include <stdio.h>
#include <string.h>
#include "landmark.h"

int main(int argc, char **argv) {
    if (argc < 2) return 90;
    if (strlen(lmk_version()) == 0) return 91;

    LmkVolume *v = NULL;
    if (lmk_volume_read("/nonexistent/x.nii.gz", &v) != LMK_STATUS_IO) return 92;
    char msg[256];
    if (lmk_last_error_message(msg, sizeof msg) == 0) return 93;

    size_t shape[3] = {32, 32, 32};
    if (lmk_synth_generate(argv[1], 2, 0, shape, 2, 0, 0.0) != LMK_STATUS_OK) return 94;

    char path[1024];
    snprintf(path, sizeof path, "%s/imagesTr/case_000.nii.gz", argv[1]);
    if (lmk_volume_read(path, &v) != LMK_STATUS_OK) return 95;
    size_t got[3];
    double spacing[3];
    lmk_volume_info(v, got, spacing);
    lmk_volume_free(v);
    if (got[0] != 32 || spacing[2] != 1.0) return 96;
    printf("ok\n");
    return 0;
}
