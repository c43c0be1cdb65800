#include "hemosbi/cli.hpp"

int main(int argc, char** argv)
{
    return hemosbi::run_cli(argc, argv);
}
