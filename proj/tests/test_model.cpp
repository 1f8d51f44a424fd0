#include <catch2/catch_amalgamated.hpp>
#include "tcen/model.hpp"
