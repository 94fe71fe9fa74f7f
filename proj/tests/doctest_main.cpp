#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "fedscape/tensor.hpp"

int main(int argc, char** argv) {
  fedscape::set_checked_mode(true);
  doctest::Context ctx;
  ctx.applyCommandLine(argc, argv);
  return ctx.run();
}
