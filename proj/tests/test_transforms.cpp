#include <catch2/catch_amalgamated.hpp>
#include "tcen/transforms.hpp"
