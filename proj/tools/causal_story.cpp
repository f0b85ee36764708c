#include <string>
#include <vector>

#include <causal_story/cli.hpp>

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return causal_story::run_cli(args);
}
