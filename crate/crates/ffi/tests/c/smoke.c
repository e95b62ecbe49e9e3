#include <stdio.h>
#include <string.h>

#include "moelab.h"

#define CHECK(cond)                                                  \
  do {                                                               \
    if (!(cond)) {                                                   \
      fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond, \
              moelab_last_error());                                  \
      return 1;                                                      \
    }                                                                \
  } while (0)

int main(void) {
  printf("moelab %s\n", moelab_version());

  MoelabResponse *r = NULL;
  const char *body = "{}";
  CHECK(moelab_call("fixtures", (const uint8_t *)body, strlen(body), &r) ==
        MOELAB_STATUS_OK);
  CHECK(moelab_response_http_status(r) == 200);
  CHECK(moelab_response_exit_code(r) == 0);
  CHECK(strstr(moelab_response_json(r), "deepseek-v3") != NULL);
  CHECK(strlen(moelab_response_json(r)) == moelab_response_json_len(r));
  moelab_response_free(r);

  CHECK(moelab_call("estimate", (const uint8_t *)"nope", 4, &r) ==
        MOELAB_STATUS_OK);
  CHECK(moelab_response_http_status(r) == 400);
  moelab_response_free(r);

  CHECK(moelab_call("bogus", NULL, 0, &r) == MOELAB_STATUS_UNKNOWN_OPERATION);
  CHECK(strstr(moelab_last_error(), "bogus") != NULL);

  MoelabStash *s = NULL;
  CHECK(moelab_stash_new(8, 4, 2, 64, &s) == MOELAB_STATUS_OK);
  uint8_t in[20], out[20];
  for (int i = 0; i < 20; i++) in[i] = (uint8_t)(i * 7);
  size_t pages = 0;
  CHECK(moelab_stash_put(s, 3, 10, in, sizeof in, &pages) == MOELAB_STATUS_OK);
  CHECK(pages == 3);
  CHECK(moelab_stash_free_pages(s) == 5);

  size_t len = 0;
  CHECK(moelab_stash_take(s, 3, out, 4, &len) == MOELAB_STATUS_BUFFER_TOO_SMALL);
  CHECK(moelab_stash_layer_bytes(s, 3, &len) == MOELAB_STATUS_OK && len == 20);
  CHECK(moelab_stash_take(s, 3, out, sizeof out, &len) == MOELAB_STATUS_OK);
  CHECK(len == 20 && memcmp(in, out, 20) == 0);
  CHECK(moelab_stash_free_pages(s) == 8);
  CHECK(moelab_stash_peak_pages(s) == 3);

  uint8_t big[2 * 40];
  CHECK(moelab_stash_put(s, 0, 40, big, sizeof big, NULL) ==
        MOELAB_STATUS_OUT_OF_PAGES);
  moelab_stash_free(s);

  puts("ok");
  return 0;
}
