#pragma once

#include "maestro/agents.hpp"
#include "maestro/chat_client.hpp"
#include "maestro/clpo.hpp"
#include "maestro/core.hpp"
#include "maestro/gradcheck.hpp"
#include "maestro/math.hpp"
#include "maestro/orchestrator.hpp"
#include "maestro/prompts.hpp"
#include "maestro/reliability.hpp"
#include "maestro/reward.hpp"
#include "maestro/rng.hpp"
#include "maestro/runner.hpp"
#include "maestro/selector.hpp"
