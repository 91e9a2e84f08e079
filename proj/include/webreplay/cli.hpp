#pragma once

namespace webreplay {

/// Entry point for the webreplay command line. Returns 0 on success, 1 on
/// operational failure and 2 on usage or configuration errors.
int run(int argc, char** argv);

}  // namespace webreplay
