#pragma once

#include <string>
#include <vector>

namespace squads::cli {

int run(int argc, char** argv);
int run(const std::vector<std::string>& args);

}  // namespace squads::cli
