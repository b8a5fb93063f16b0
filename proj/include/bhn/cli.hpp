#pragma once

namespace bhn {

/// Parses argv and dispatches to the experiment runners. Returns the
/// process exit code; never throws.
int run_cli(int argc, const char* const* argv);

}  // namespace bhn
