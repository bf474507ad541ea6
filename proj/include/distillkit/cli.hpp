#pragma once

namespace distillkit {

// Exit codes: 0 success, 2 invalid configuration, 3 missing artifact, 1 other failure.
int cli_main(int argc, char** argv);

}  // namespace distillkit
