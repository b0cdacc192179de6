#pragma once

#include "descevo/archive.hpp"
#include "descevo/clustering.hpp"
#include "descevo/error.hpp"
#include "descevo/evolution.hpp"
#include "descevo/mock_embed.hpp"
#include "descevo/prompts.hpp"
#include "descevo/provider.hpp"
#include "descevo/response_parser.hpp"
#include "descevo/rng.hpp"
#include "descevo/scoring.hpp"
#include "descevo/strings.hpp"
#include "descevo/text_embedder.hpp"
#include "descevo/types.hpp"
