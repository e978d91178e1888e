#pragma once

#include "doctest.h"
#include "reference.hpp"
