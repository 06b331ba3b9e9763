#include <stdio.h>
#include <string.h>
#include "membase.h"

/* argv[1]: config JSON, argv[2]: schema JSON text */
int main(int argc, char **argv) {
    if (argc < 3) return 64;
    MbHandle *h = NULL;
    MbStatus st = mb_open(argv[1], &h);
    if (st != MB_STATUS_OK) {
        fprintf(stderr, "open: %s\n", mb_last_error());
        return 1;
    }
    char *out = NULL;
    st = mb_install_schema(h, argv[2], &out);
    if (st != MB_STATUS_OK) {
        fprintf(stderr, "install: %s\n", mb_last_error());
        return 2;
    }
    mb_string_free(out);
    st = mb_get_entity(h, "ToolProfile", "tool=none", &out);
    if (st != MB_STATUS_NOT_FOUND || out != NULL || mb_last_error() == NULL) return 3;
    st = mb_health(h, &out);
    if (st != MB_STATUS_OK) return 4;
    printf("%s\n", out);
    mb_string_free(out);
    mb_close(h);
    printf("version %s\n", mb_version());
    return 0;
}
