#pragma once

// Command-line front end. It lives in the library so tests can drive every
// subcommand in-process.
//
//   deltaroute train    --config PATH --out DIR [--mode NAME] [--seed N]
//   deltaroute eval     --checkpoint PATH --config PATH [--out DIR]
//   deltaroute analyze  --out DIR (--trace PATH | --checkpoint PATH --config PATH)
//   deltaroute convert  --checkpoint PATH --mode NAME --out DIR [--num-blocks B] [--null-source]
//   deltaroute finetune --checkpoint PATH --config PATH --out DIR [--mode NAME] [--seed N]
//                       [--routing-lr-ratio R]
//   deltaroute ablate   --config PATH --block-sizes B1,B2,... --out DIR [--seed N]
//
// --block-sizes lists numbers of blocks; each row trains with ceil(L / B)
// layers per block. DELTAROUTE_THREADS caps how many rows run at once.

#include <ostream>
#include <string>
#include <vector>

namespace deltaroute {

/// Runs one subcommand; `args` excludes the program name. Returns 0 on
/// success, 2 for invalid arguments or configuration, 1 for other failures.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace deltaroute
